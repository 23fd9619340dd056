"""Panels, artificial masking, min-max scaling, observation gaps and decay pre-completion."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError, InfeasibleMaskError
from .layers import Module, Weight


@dataclass(frozen=True)
class NormStats:
    """Per-feature statistics of one panel; ``mean``/``std`` are in scaled units."""

    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    missing_rate: np.ndarray
    length: int
    degenerate: np.ndarray


@dataclass
class TimeSeriesPanel:
    """One subject's multivariate series.

    ``values`` holds NaN wherever ``obs_mask`` is 0. Cells hidden for evaluation
    have ``eval_mask`` 1 and their true value in ``truth`` (NaN elsewhere).
    """

    panel_id: str
    values: np.ndarray
    timestamps: np.ndarray
    analytes: tuple
    obs_mask: np.ndarray = None
    eval_mask: np.ndarray = None
    truth: np.ndarray = None
    gaps: Optional[np.ndarray] = None
    norm: Optional[NormStats] = None
    normalized: bool = False

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"panel {self.panel_id}: values must be T x F, got {self.values.shape}")
        T, F = self.values.shape
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(T)
        self.analytes = tuple(self.analytes)
        if len(self.analytes) != F:
            raise DataError(f"panel {self.panel_id}: {F} columns but {len(self.analytes)} analyte names")
        if self.obs_mask is None:
            self.obs_mask = (~np.isnan(self.values)).astype(np.int8)
        else:
            self.obs_mask = np.asarray(self.obs_mask, dtype=np.int8)
            self.values = np.where(self.obs_mask == 1, self.values, np.nan)
        if self.eval_mask is None:
            self.eval_mask = np.zeros((T, F), dtype=np.int8)
        self.eval_mask = np.asarray(self.eval_mask, dtype=np.int8)
        if self.truth is None:
            self.truth = np.full((T, F), np.nan)
        if np.any((self.eval_mask == 1) & (self.obs_mask == 1)):
            raise DataError(f"panel {self.panel_id}: evaluation cells must be unobserved")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def F(self) -> int:
        return self.values.shape[1]

    def replace(self, **changes) -> "TimeSeriesPanel":
        return dataclasses.replace(self, **changes)

    def ground_truth(self) -> np.ndarray:
        """Observed values with held-out truths filled back in (raw units)."""
        vals = self.values
        if self.normalized:
            vals = denormalize(vals, self.norm)
        return np.where(self.eval_mask == 1, self.truth, vals)


# ------------------------------------------------------------------ masking


@dataclass(frozen=True)
class MaskPlan:
    """How many and which observed cells to hide for evaluation.

    ``rate`` is the fraction of each feature column (``T`` cells) to hide.
    """

    mode: str = "individual"
    rate: float = 0.05
    length: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("individual", "consecutive"):
            raise ContractError(f"mask mode must be individual or consecutive, got {self.mode!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ContractError(f"mask rate must lie in [0, 1), got {self.rate}")
        if self.mode == "consecutive" and self.length < 2:
            raise ContractError(f"consecutive masking needs run length >= 2, got {self.length}")

    @property
    def run_length(self) -> int:
        return 1 if self.mode == "individual" else self.length


def _place_runs(observed: np.ndarray, n_runs: int, m: int, rng: np.random.Generator) -> list:
    """Random non-overlapping, non-adjacent runs of ``m`` observed cells."""
    T = observed.size
    run_ok = np.array(
        [observed[s:s + m].all() for s in range(T - m + 1)], dtype=bool
    ) if T >= m else np.zeros(0, dtype=bool)
    starts = np.flatnonzero(run_ok)
    rng.shuffle(starts)
    taken = np.zeros(T, dtype=bool)
    chosen = []
    for s in starts:
        if len(chosen) == n_runs:
            break
        lo, hi = max(0, s - 1), min(T, s + m + 1)
        if taken[lo:hi].any():
            continue
        taken[s:s + m] = True
        chosen.append(int(s))
    return sorted(chosen)


def apply_mask(panel: TimeSeriesPanel, plan: MaskPlan, rng: Optional[np.random.Generator] = None) -> TimeSeriesPanel:
    """Hide observed cells for evaluation, keeping their values in ``truth``.

    Each feature column gets ``round(rate * T)`` hidden cells (rounded down to
    whole runs in consecutive mode). Runs never overlap or touch each other and
    never include a cell that was already missing.
    """
    if panel.normalized:
        raise ContractError("mask panels before normalizing them")
    if plan.rate == 0:
        return panel
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    T, F = panel.values.shape
    m = plan.run_length
    obs = panel.obs_mask.copy()
    evm = panel.eval_mask.copy()
    truth = panel.truth.copy()
    values = panel.values.copy()
    observed_frac = obs.mean()
    if plan.rate > observed_frac:
        raise InfeasibleMaskError(
            f"panel {panel.panel_id}: rate {plan.rate} exceeds observed fraction {observed_frac:.4f}",
            achievable_rate=float(observed_frac),
        )
    for f in range(F):
        col_obs = obs[:, f] == 1
        n_cells = int(round(plan.rate * T))
        if m == 1:
            idx = np.flatnonzero(col_obs)
            if n_cells > idx.size:
                raise InfeasibleMaskError(
                    f"panel {panel.panel_id}, feature {panel.analytes[f]}: "
                    f"need {n_cells} cells but only {idx.size} observed",
                    achievable_rate=idx.size / T,
                )
            cells = np.sort(rng.choice(idx, size=n_cells, replace=False))
        else:
            n_runs = n_cells // m
            starts = _place_runs(col_obs, n_runs, m, rng)
            if len(starts) < n_runs:
                raise InfeasibleMaskError(
                    f"panel {panel.panel_id}, feature {panel.analytes[f]}: "
                    f"placed only {len(starts)} of {n_runs} runs of length {m}",
                    achievable_rate=len(starts) * m / T,
                )
            cells = np.array([s + k for s in starts for k in range(m)], dtype=int)
        truth[cells, f] = values[cells, f]
        values[cells, f] = np.nan
        obs[cells, f] = 0
        evm[cells, f] = 1
    return panel.replace(values=values, obs_mask=obs, eval_mask=evm, truth=truth, gaps=None)


# ------------------------------------------------------------ normalization


def normalize(panel: TimeSeriesPanel) -> TimeSeriesPanel:
    """Min-max scale observed cells per feature to [0, 1].

    A constant feature maps to 0 and is flagged degenerate.
    """
    if panel.normalized:
        return panel
    obs = panel.obs_mask == 1
    if not obs.any(axis=0).all():
        empty = [panel.analytes[f] for f in np.flatnonzero(~obs.any(axis=0))]
        raise DataError(f"panel {panel.panel_id}: no observed values for {', '.join(empty)}")
    lo = np.nanmin(panel.values, axis=0)
    hi = np.nanmax(panel.values, axis=0)
    span = hi - lo
    degenerate = span <= 0
    safe = np.where(degenerate, 1.0, span)
    scaled = np.where(degenerate, 0.0, (panel.values - lo) / safe)
    scaled = np.where(obs, scaled, np.nan)
    mean = np.nanmean(scaled, axis=0)
    std = np.where(degenerate, 0.0, np.nanstd(scaled, axis=0))
    stats = NormStats(
        min=lo,
        max=hi,
        mean=mean,
        std=std,
        missing_rate=1.0 - obs.mean(axis=0),
        length=panel.T,
        degenerate=degenerate,
    )
    return panel.replace(values=scaled, norm=stats, normalized=True)


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    span = np.where(stats.degenerate, 0.0, stats.max - stats.min)
    return x * span + stats.min


def compute_gaps(panel: TimeSeriesPanel) -> TimeSeriesPanel:
    """Time since each feature was last observed, strictly before the current step."""
    s = panel.timestamps
    if np.any(np.diff(s) < 0):
        raise DataError(f"panel {panel.panel_id}: timestamps are not monotone")
    T, F = panel.obs_mask.shape
    gaps = np.zeros((T, F))
    step = np.diff(s)
    for t in range(1, T):
        carry = np.where(panel.obs_mask[t - 1] == 0, gaps[t - 1], 0.0)
        gaps[t] = step[t - 1] + carry
    return panel.replace(gaps=gaps)


def last_observation(panel: TimeSeriesPanel) -> np.ndarray:
    """Most recent observed value at or before each step; the feature mean where none exists yet."""
    if not panel.normalized:
        raise ContractError("last_observation expects a normalized panel")
    T, F = panel.values.shape
    out = np.empty((T, F))
    last = panel.norm.mean.copy()
    for t in range(T):
        seen = panel.obs_mask[t] == 1
        last = np.where(seen, panel.values[t], last)
        out[t] = last
    return out


def prepare(panel: TimeSeriesPanel) -> TimeSeriesPanel:
    """Normalize and compute gaps: everything the model needs besides trainable parts."""
    return compute_gaps(normalize(panel))


# ------------------------------------------------------------------- decay


class DecayModule(Module):
    """Trainable ``gamma = exp(-max(0, delta W^T + b))`` over observation gaps."""

    def __init__(self, n_features: int, weight_init: Optional[np.ndarray] = None, bias_init=None):
        w0 = 0.1 * np.eye(n_features) if weight_init is None else weight_init
        b0 = np.zeros((1, n_features)) if bias_init is None else np.reshape(bias_init, (1, n_features))
        self.W = Weight(w0, "decay.W")
        self.b = Weight(b0, "decay.b")

    def gamma(self, gaps: Tensor) -> Tensor:
        return ad.exp(ad.neg(ad.relu(ad.linear(gaps, self.W.value(), self.b.value()))))


def decay_blend(values: np.ndarray, mask: np.ndarray, last_obs: np.ndarray, mean: np.ndarray, gamma: Tensor) -> Tensor:
    """``M x + (1 - M) (gamma x_last + (1 - gamma) x_mean)`` with constant data arrays."""
    mean = np.broadcast_to(mean, last_obs.shape)
    x_prime = Tensor(mean) + gamma * Tensor(last_obs - mean)
    filled = Tensor(np.where(mask == 1, np.nan_to_num(values), 0.0))
    return filled + Tensor(1.0 - mask) * x_prime


def decay_precomplete(panel: TimeSeriesPanel, decay: DecayModule) -> tuple:
    """Pre-complete one normalized panel; returns ``(x_tilde, gamma)`` as tensors."""
    if not panel.normalized or panel.gaps is None:
        raise ContractError("decay_precomplete needs a normalized panel with gaps")
    gamma = decay.gamma(Tensor(panel.gaps))
    mask = panel.obs_mask.astype(np.float64)
    x_tilde = decay_blend(panel.values, mask, last_observation(panel), panel.norm.mean, gamma)
    return x_tilde, gamma
