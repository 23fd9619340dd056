import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import masked_synthetic, tiny_config
from oracles import nrmse_direct
from vimpute.errors import ContractError, DataError
from vimpute.evaluation import (
    MetricTable,
    PosteriorPredictive,
    compare_runs,
    locf_impute,
    mean_impute,
    nrmse,
    nrmse_all,
    point_impute,
    posterior_predict,
    relative_improvement,
)
from vimpute.model import ImputationModel
from vimpute.preprocessing import TimeSeriesPanel


def one_feature(truth, imputed, evals):
    col = lambda v: np.asarray(v, dtype=float)[:, None]  # noqa: E731
    return [col(truth)], [col(imputed)], [col(evals).astype(int)]


def test_nrmse_examples():
    x, y, e = one_feature([0, 10, 5, 5], [0, 10, 5, 5], [0, 1, 1, 0])
    assert nrmse(x, y, e, 0) == 0
    x, y, e = one_feature([0, 10, 4, 6], [0, 10, 5, 9], [0, 0, 1, 1])
    assert nrmse(x, y, e, 0) == pytest.approx(math.sqrt((0.01 + 0.09) / 2), abs=1e-15)
    assert nrmse([2 * x[0]], [2 * y[0]], e, 0) == pytest.approx(nrmse(x, y, e, 0), abs=1e-15)


def test_nrmse_skips_flat_panels_with_warning(caplog):
    x1, y1, e1 = one_feature([3, 3, 3], [3, 4, 3], [0, 1, 0])
    x2, y2, e2 = one_feature([0, 10, 5], [0, 10, 7], [0, 0, 1])
    with caplog.at_level(logging.WARNING):
        got = nrmse(x1 + x2, y1 + y2, e1 + e2, 0)
    assert got == pytest.approx(0.2)
    assert "zero range" in caplog.text
    with pytest.raises(ContractError):
        nrmse(x1, y1, [np.zeros((3, 1), int)], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50), st.floats(-100, 100))
def test_nrmse_matches_oracle_and_is_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    P, T, F = 3, 15, 2
    truth = [rng.normal(size=(T, F)) for _ in range(P)]
    for x in truth:
        x[rng.random((T, F)) < 0.1] = np.nan
    imputed = [np.nan_to_num(x) + rng.normal(scale=0.3, size=(T, F)) for x in truth]
    evals = [((rng.random((T, F)) < 0.3) & ~np.isnan(x)).astype(int) for x in truth]
    for f in range(F):
        if sum(e[:, f].sum() for e in evals) == 0:
            continue
        want = nrmse_direct(truth, imputed, evals, f)
        assert nrmse(truth, imputed, evals, f) == pytest.approx(want, rel=1e-12)
        moved = nrmse([a * x + b for x in truth], [a * y + b for y in imputed], evals, f)
        assert moved == pytest.approx(want, rel=1e-9)


def test_baselines():
    x = np.array([[1.0, np.nan], [np.nan, 2.0], [3.0, np.nan], [np.nan, 6.0]])
    p = TimeSeriesPanel("p", x, np.arange(4.0), ["a", "b"])
    np.testing.assert_array_equal(mean_impute(p), [[1, 4], [2, 2], [3, 4], [2, 6]])
    np.testing.assert_array_equal(locf_impute(p), [[1, 2], [1, 2], [3, 2], [3, 6]])


def test_percentile_ordering_any_sample_count():
    rng = np.random.default_rng(0)
    for S in (1, 2, 7, 30):
        pp = PosteriorPredictive("p", rng.normal(size=(S, 5, 3)))
        assert np.all(pp.p5 <= pp.p50) and np.all(pp.p50 <= pp.p95) and np.all(pp.std >= 0)
    single = PosteriorPredictive("p", rng.normal(size=(1, 4, 2)))
    for arr in (single.mean, single.p5, single.p50, single.p95):
        np.testing.assert_array_equal(arr, single.samples[0])


def test_collapsed_posterior_has_no_spread():
    panels = masked_synthetic(2, T=12, F=3, seed=1)
    model = ImputationModel(tiny_config(rho_init=-40.0), seed=0)
    (pp, _) = posterior_predict(model, panels, S=5, seed=3)
    # softplus(-40) is about 4e-18, so spread is at rounding level
    assert np.max(pp.std) < 1e-12
    np.testing.assert_allclose(pp.p5, pp.p95, rtol=0, atol=1e-12)


def test_posterior_predict_contracts():
    panels = masked_synthetic(2, T=12, F=3, seed=1)
    with pytest.raises(ContractError):
        posterior_predict(ImputationModel(tiny_config("catsi")), panels, S=3)
    model = ImputationModel(tiny_config(), seed=0)
    a = posterior_predict(model, panels, S=4, seed=9)
    b = posterior_predict(model, panels, S=6, seed=9)
    np.testing.assert_array_equal(a[0].samples, b[0].samples[:4])
    assert np.any(a[0].std > 0)
    for p, pp in zip(panels, a):
        obs = p.obs_mask == 1
        assert np.all(pp.samples[:, obs] == p.values[obs])
    assert point_impute(model, panels).shape == (2, 12, 3)


def test_metric_table_and_csv_round_trip():
    scores = np.array([[0.1, 0.3], [0.2, 0.5], [0.15, 0.4]])
    t = MetricTable.from_scores(["a", "b"], scores)
    assert t.analytes == ["a", "b", "mean_of_mean"]
    assert t.mean_of_mean == pytest.approx(np.mean(scores))
    assert t.row("a")["std"] == pytest.approx(np.std(scores[:, 0], ddof=1))
    assert np.all(t.band_low <= t.mean) and np.all(t.mean <= t.band_high)
    text = t.to_csv()
    assert text.splitlines()[0] == "analyte,mean_nrmse,band_low,band_high,std"
    assert MetricTable.from_csv(text) == t
    c = compare_runs(t, t)
    np.testing.assert_array_equal(c.relative_improvement, 0)
    assert MetricTable.from_csv(c.to_csv()) == c
    with pytest.raises(DataError):
        MetricTable.from_csv("nope\n")


def test_relative_improvement_reference_values():
    assert round(100 * relative_improvement(0.2185, 0.1976), 2) == 9.57
    assert round(100 * relative_improvement(0.1690, 0.1756), 2) == -3.76
    base = MetricTable.from_scores(["a"], np.array([[0.2185]]))
    with pytest.raises(DataError):
        compare_runs(base, MetricTable.from_scores(["b"], np.array([[0.2]])))


def test_nrmse_all_shape():
    panels = masked_synthetic(2, T=30, F=3, seed=4, rate=0.1)
    scores = nrmse_all([p.ground_truth() for p in panels], [mean_impute(p) for p in panels],
                       [p.eval_mask for p in panels])
    assert scores.shape == (3,) and np.all(scores > 0)
