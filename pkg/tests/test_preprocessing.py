import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gaps_direct
from vimpute.autodiff import Tensor
from vimpute.errors import ContractError, DataError, InfeasibleMaskError
from vimpute.preprocessing import (
    DecayModule,
    MaskPlan,
    TimeSeriesPanel,
    apply_mask,
    compute_gaps,
    decay_blend,
    decay_precomplete,
    denormalize,
    normalize,
    prepare,
)


def panel(values, timestamps=None, name="p"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    T, F = values.shape
    ts = np.arange(T, dtype=float) if timestamps is None else timestamps
    return TimeSeriesPanel(name, values, ts, [f"a{f}" for f in range(F)])


def runs(column):
    """Lengths of maximal runs of ones, by exhaustive scan."""
    out, n = [], 0
    for v in list(column) + [0]:
        if v:
            n += 1
        elif n:
            out.append(n)
            n = 0
    return out


def test_individual_mask_count():
    p = apply_mask(panel(np.random.default_rng(0).normal(size=100)), MaskPlan(rate=0.05, seed=1))
    assert p.eval_mask.sum() == 5
    assert np.all(p.obs_mask[p.eval_mask == 1] == 0)
    assert np.all(np.isnan(p.values[p.eval_mask == 1]))


@pytest.mark.parametrize("m", [2, 3, 4, 5])
def test_consecutive_runs_have_exact_length_and_avoid_missing(m):
    rng = np.random.default_rng(m)
    x = rng.normal(size=(300, 4))
    x[rng.random(x.shape) < 0.1] = np.nan
    before = np.isnan(x)
    p = apply_mask(panel(x), MaskPlan(mode="consecutive", rate=0.05, length=m, seed=2))
    for f in range(4):
        lengths = runs(p.eval_mask[:, f])
        assert lengths and all(n == m for n in lengths)
        assert not np.any(before[:, f] & (p.eval_mask[:, f] == 1))
    np.testing.assert_array_equal(p.truth[p.eval_mask == 1], x[p.eval_mask == 1])


def test_rate_zero_is_identity():
    p = panel(np.arange(10.0))
    assert apply_mask(p, MaskPlan(rate=0.0)) is p


def test_infeasible_rate_reports_achievable_rate():
    x = np.arange(20.0)
    x[::2] = np.nan
    with pytest.raises(InfeasibleMaskError) as info:
        apply_mask(panel(x), MaskPlan(rate=0.9))
    assert info.value.achievable_rate == pytest.approx(0.5)
    with pytest.raises(InfeasibleMaskError):
        apply_mask(panel(x), MaskPlan(mode="consecutive", rate=0.3, length=2))


def test_mask_plan_validation():
    with pytest.raises(ContractError):
        MaskPlan(mode="blocks")
    with pytest.raises(ContractError):
        MaskPlan(mode="consecutive", length=1)


def test_eval_cells_must_be_unobserved():
    with pytest.raises(DataError):
        TimeSeriesPanel("p", [[1.0]], [0.0], ["a"], eval_mask=[[1]])


def test_normalize_examples():
    p = normalize(panel([2.0, 4.0, 6.0]))
    np.testing.assert_array_equal(p.values[:, 0], [0, 0.5, 1])
    const = normalize(panel([5.0, 5.0]))
    np.testing.assert_array_equal(const.values[:, 0], [0, 0])
    assert const.norm.degenerate[0]


def test_normalize_round_trip_and_range():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 3)) * [1, 10, 100]
    x[rng.random(x.shape) < 0.2] = np.nan
    p = normalize(panel(x))
    obs = p.obs_mask == 1
    assert p.values[obs].min() >= 0 and p.values[obs].max() <= 1
    np.testing.assert_allclose(denormalize(p.values, p.norm)[obs], x[obs], atol=1e-10)


def test_normalize_needs_an_observation_per_feature():
    with pytest.raises(DataError):
        normalize(panel([[1.0, np.nan], [2.0, np.nan]]))


def test_gap_examples():
    p = panel([1.0, np.nan, np.nan, 4.0])
    np.testing.assert_array_equal(compute_gaps(p).gaps[:, 0], [0, 1, 2, 3])
    np.testing.assert_array_equal(compute_gaps(panel(np.ones(5))).gaps[:, 0], [0, 1, 1, 1, 1])
    np.testing.assert_array_equal(compute_gaps(panel([3.0])).gaps[:, 0], [0])
    with pytest.raises(DataError):
        compute_gaps(panel([1.0, 2.0, 3.0], timestamps=np.array([0.0, 2.0, 1.0])))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000))
def test_gaps_match_direct_recurrence(T, seed):
    rng = np.random.default_rng(seed)
    s = np.cumsum(rng.uniform(0, 3, T))
    m = (rng.random(T) < 0.6).astype(int)
    x = np.where(m == 1, 1.0, np.nan)
    got = compute_gaps(panel(x, timestamps=s)).gaps[:, 0]
    np.testing.assert_array_equal(got, gaps_direct(s, m))


def test_decay_examples():
    vals = np.array([[1.0], [np.nan], [np.nan], [0.0], [np.nan]])
    p = prepare(panel(vals))
    zero = DecayModule(1, weight_init=np.zeros((1, 1)))
    x_tilde, gamma = decay_precomplete(p, zero)
    np.testing.assert_array_equal(gamma.data, 1.0)
    np.testing.assert_array_equal(x_tilde.data[:, 0], [1, 1, 1, 0, 0])
    mask = np.array([[1.0], [0.0], [0.0]])
    last = np.ones((3, 1))
    x = decay_blend(np.array([[1.0], [np.nan], [np.nan]]), mask, last, np.array([1.0]), Tensor(np.full((3, 1), 0.5)))
    np.testing.assert_array_equal(x.data[:, 0], [1, 1, 1])
    forced = decay_blend(np.array([[1.0], [np.nan], [np.nan]]), mask, last, np.array([0.25]), Tensor(np.zeros((3, 1))))
    np.testing.assert_array_equal(forced.data[1:, 0], [0.25, 0.25])


def test_decay_preserves_observations_and_bounds():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(30, 3))
    x[rng.random(x.shape) < 0.3] = np.nan
    p = prepare(panel(x))
    decay = DecayModule(3, weight_init=rng.normal(size=(3, 3)), bias_init=rng.normal(size=3))
    x_tilde, gamma = decay_precomplete(p, decay)
    obs = p.obs_mask == 1
    np.testing.assert_array_equal(x_tilde.data[obs], p.values[obs])
    assert np.all((gamma.data > 0) & (gamma.data <= 1))
    pre = p.gaps @ decay.W.point.data.T + decay.b.point.data
    np.testing.assert_array_equal(gamma.data == 1.0, pre <= 0)


def test_decay_is_monotone_in_staleness():
    decay = DecayModule(2, weight_init=np.diag([0.3, 1.2]))
    deltas = np.linspace(0, 20, 81)
    grid = Tensor(np.column_stack([deltas, deltas]))
    g = decay.gamma(grid).data
    assert np.all(np.diff(g, axis=0) <= 0)


def test_mask_never_touches_originally_missing_cells():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(200, 5))
    x[rng.random(x.shape) < 0.3] = np.nan
    p = apply_mask(panel(x), MaskPlan(rate=0.1, seed=3))
    assert not np.any(np.isnan(x) & (p.eval_mask == 1))
    np.testing.assert_array_equal(p.ground_truth(), np.where(np.isnan(x), np.nan, x))
