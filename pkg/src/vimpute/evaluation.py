"""Range-normalized RMSE, posterior predictive sampling and metric tables."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError
from .model import ImputationModel, collate, impute_batch
from .preprocessing import TimeSeriesPanel

logger = logging.getLogger(__name__)

MEAN_ROW = "mean_of_mean"
TABLE_HEADER = ["analyte", "mean_nrmse", "band_low", "band_high", "std"]


def nrmse(truths: Sequence[np.ndarray], imputed: Sequence[np.ndarray], eval_masks: Sequence[np.ndarray], f: int) -> float:
    """RMSE over evaluation cells of feature ``f``, each error scaled by its panel's range.

    The range of a panel is taken over its ground-truth column (NaN-aware).
    Panels whose range is zero are skipped with a warning.
    """
    num, den = 0.0, 0
    for p, (x, y, e) in enumerate(zip(truths, imputed, eval_masks)):
        sel = np.asarray(e)[:, f] == 1
        if not sel.any():
            continue
        col = np.asarray(x)[:, f]
        span = np.nanmax(col) - np.nanmin(col)
        if not span > 0:
            logger.warning("panel %d feature %d has zero range; its cells are excluded", p, f)
            continue
        err = (np.abs(col[sel] - np.asarray(y)[sel, f]) / span) ** 2
        num += float(err.sum())
        den += int(sel.sum())
    if den == 0:
        raise ContractError(f"nrmse: no evaluation cells for feature {f}")
    return math.sqrt(num / den)


def nrmse_all(truths, imputed, eval_masks) -> np.ndarray:
    F = np.asarray(truths[0]).shape[1]
    return np.array([nrmse(truths, imputed, eval_masks, f) for f in range(F)])


# ---------------------------------------------------------------- baselines


def mean_impute(panel: TimeSeriesPanel) -> np.ndarray:
    """Missing cells get the feature's mean over observed cells."""
    mean = np.nanmean(panel.values, axis=0)
    return np.where(panel.obs_mask == 1, panel.values, mean)


def locf_impute(panel: TimeSeriesPanel) -> np.ndarray:
    """Last observation carried forward; leading gaps take the first observation."""
    out = panel.values.copy()
    for f in range(panel.F):
        col = out[:, f]
        obs = np.flatnonzero(panel.obs_mask[:, f] == 1)
        if obs.size == 0:
            continue
        idx = np.maximum.accumulate(np.where(panel.obs_mask[:, f] == 1, np.arange(panel.T), 0))
        idx[: obs[0]] = obs[0]
        out[:, f] = col[idx]
    return out


# ------------------------------------------------------- posterior samples


@dataclass
class PosteriorPredictive:
    """``S`` imputed versions of one panel and per-cell summaries (raw units)."""

    panel_id: str
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        s = self.samples
        self.mean = s.mean(axis=0)
        self.std = s.std(axis=0)
        self.p5, self.p50, self.p95 = np.percentile(s, [5, 50, 95], axis=0)

    @property
    def S(self) -> int:
        return self.samples.shape[0]


def posterior_predict(model: ImputationModel, panels: Sequence[TimeSeriesPanel], S: int = 30, seed: int = 0) -> list:
    """Impute ``panels`` under ``S`` independent weight samples.

    Sample ``s`` always uses noise stream ``s`` of ``seed``, so results do not
    depend on how many samples are requested alongside it.
    """
    if not model.variational_tensors():
        raise ContractError("deterministic model has no posterior; train several runs instead")
    if S < 1:
        raise ContractError(f"need at least one posterior sample, got {S}")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(S)]
    batch = collate(list(panels), model.cfg.t_max)
    draws = []
    for rng in streams:
        model.sample_weights(rng)
        draws.append(impute_batch(model, batch))
    draws = np.stack(draws, axis=1)  # P x S x T x F
    return [PosteriorPredictive(p.panel_id, d) for p, d in zip(panels, draws)]


def point_impute(model: ImputationModel, panels: Sequence[TimeSeriesPanel]) -> np.ndarray:
    """Imputation with every variational weight at its mean; ``P x T x F``."""
    model.use_mean_weights()
    return impute_batch(model, collate(list(panels), model.cfg.t_max))


# ------------------------------------------------------------ metric tables


@dataclass
class MetricTable:
    """Per-analyte nRMSE summaries plus a mean-of-means row.

    ``relative_improvement`` (fractions, one per row including the mean row) is
    filled by :func:`compare_runs`; positive means the candidate is better.
    """

    analytes: list
    mean: np.ndarray
    band_low: np.ndarray
    band_high: np.ndarray
    std: np.ndarray
    relative_improvement: Optional[np.ndarray] = None

    @classmethod
    def from_scores(cls, analytes: Sequence[str], scores: np.ndarray) -> "MetricTable":
        """Summarize an ``n_runs x F`` array of nRMSE values.

        The last row summarizes the per-run mean across analytes.
        """
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        full = np.column_stack([scores, scores.mean(axis=1)])
        lo, hi = np.percentile(full, [2.5, 97.5], axis=0)
        std = full.std(axis=0, ddof=1) if full.shape[0] > 1 else np.zeros(full.shape[1])
        return cls(list(analytes) + [MEAN_ROW], full.mean(axis=0), lo, hi, std)

    @property
    def mean_of_mean(self) -> float:
        return float(self.mean[self.analytes.index(MEAN_ROW)])

    def row(self, analyte: str) -> dict:
        i = self.analytes.index(analyte)
        out = {
            "analyte": analyte,
            "mean_nrmse": float(self.mean[i]),
            "band_low": float(self.band_low[i]),
            "band_high": float(self.band_high[i]),
            "std": float(self.std[i]),
        }
        if self.relative_improvement is not None:
            out["relative_improvement"] = float(self.relative_improvement[i])
        return out

    def to_csv(self) -> str:
        header = TABLE_HEADER + (["relative_improvement"] if self.relative_improvement is not None else [])
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for a in self.analytes:
            r = self.row(a)
            writer.writerow([a] + [repr(r[k]) for k in header[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricTable":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty metric table") from None
        if header[: len(TABLE_HEADER)] != TABLE_HEADER:
            raise DataError(f"unexpected metric table header {header}")
        has_rel = "relative_improvement" in header
        rows = [r for r in reader if r]
        try:
            cols = np.array([[float(v) for v in r[1:]] for r in rows])
        except ValueError as exc:
            raise DataError(f"bad number in metric table: {exc}") from None
        return cls(
            [r[0] for r in rows], cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3],
            cols[:, 4] if has_rel else None,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, MetricTable):
            return NotImplemented
        arrays = ("mean", "band_low", "band_high", "std")
        same_rel = (self.relative_improvement is None) == (other.relative_improvement is None)
        if same_rel and self.relative_improvement is not None:
            same_rel = np.array_equal(self.relative_improvement, other.relative_improvement)
        return (
            self.analytes == other.analytes
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
            and same_rel
        )


def relative_improvement(baseline: float, candidate: float) -> float:
    """Gain of ``candidate`` over ``baseline`` relative to the worse of the two.

    Positive when the candidate's error is lower.
    """
    worst = max(baseline, candidate)
    return 0.0 if worst == 0 else (baseline - candidate) / worst


def compare_runs(candidate: MetricTable, baseline: MetricTable) -> MetricTable:
    if candidate.analytes != baseline.analytes:
        raise DataError(f"analyte sets differ: {candidate.analytes} vs {baseline.analytes}")
    rel = np.array([relative_improvement(b, c) for b, c in zip(baseline.mean, candidate.mean)])
    return MetricTable(
        list(candidate.analytes), candidate.mean.copy(), candidate.band_low.copy(),
        candidate.band_high.copy(), candidate.std.copy(), rel,
    )
