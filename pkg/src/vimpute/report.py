"""Metric tables and SVG figures: series overlays with intervals, per-cell histograms."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DataError  # noqa: E402
from .evaluation import MetricTable, PosteriorPredictive  # noqa: E402
from .preprocessing import TimeSeriesPanel  # noqa: E402

logger = logging.getLogger(__name__)

MAX_HIST_CELLS = 9
_SVG = {"svg.hashsalt": "vimpute", "svg.fonttype": "path"}


def _save(fig, path: Path) -> None:
    with matplotlib.rc_context(_SVG):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def overlay_plot(panel: TimeSeriesPanel, pred: PosteriorPredictive, f: int, path: Path) -> None:
    """Observed series, imputed cells, the 5-95 percentile band and eval-cell markers."""
    t = panel.timestamps
    obs = panel.obs_mask[:, f] == 1
    miss = ~obs
    fig, ax = plt.subplots(figsize=(9, 3))
    ax.fill_between(t, pred.p5[:, f], pred.p95[:, f], color="tab:blue", alpha=0.25, lw=0, label="5-95% band")
    ax.plot(t, np.where(obs, panel.values[:, f], np.nan), color="black", lw=0.8, label="observed")
    ax.plot(t[miss], pred.mean[miss, f], "o", ms=2.5, color="tab:blue", label="imputed")
    ev = np.flatnonzero(panel.eval_mask[:, f] == 1)
    for k in ev:
        ax.axvline(t[k], color="tab:red", lw=0.4, alpha=0.5)
    if ev.size:
        ax.plot(t[ev], panel.truth[ev, f], "x", ms=3, color="tab:red", label="held-out truth")
    ax.set_xlabel("time")
    ax.set_ylabel(panel.analytes[f])
    ax.set_title(f"{panel.panel_id} / {panel.analytes[f]}")
    ax.legend(loc="upper right", fontsize=7, ncol=4)
    fig.tight_layout()
    _save(fig, path)


def histogram_plot(panel: TimeSeriesPanel, pred: PosteriorPredictive, f: int, path: Path) -> int:
    """Posterior sample histograms for up to ``MAX_HIST_CELLS`` evaluation cells."""
    cells = np.flatnonzero(panel.eval_mask[:, f] == 1)[:MAX_HIST_CELLS]
    n = cells.size
    cols = min(3, n)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.2 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.set_visible(False)
    for ax, k in zip(axes.flat, cells):
        ax.hist(pred.samples[:, k, f], bins=15, color="tab:blue", alpha=0.7)
        for q in (pred.p5[k, f], pred.p95[k, f]):
            ax.axvline(q, color="tab:orange", lw=1)
        ax.axvline(panel.truth[k, f], color="tab:red", lw=1.2)
        ax.set_title(f"t={panel.timestamps[k]:g}", fontsize=8)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    _save(fig, path)
    return n


def render_report(table: Optional[MetricTable], predictive: Sequence[tuple], out_dir) -> dict:
    """Write ``metrics.csv`` and, per panel and analyte with evaluation cells, an overlay
    ``{panel}_{analyte}.svg`` plus ``histograms/{panel}_{analyte}.svg``.

    ``predictive`` holds ``(panel, PosteriorPredictive)`` pairs; panels carry
    their evaluation masks and held-out truths. Returns the written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"cannot write report to {out}: {exc}") from None
    written = {"table": None, "overlays": [], "histograms": [], "notices": []}
    if table is not None:
        path = out / "metrics.csv"
        path.write_text(table.to_csv())
        written["table"] = path
    if not any(p.eval_mask.any() for p, _ in predictive):
        msg = "no evaluation cells: plots skipped"
        logger.warning(msg)
        written["notices"].append(msg)
        return written
    (out / "histograms").mkdir(exist_ok=True)
    for panel, pred in predictive:
        for f, name in enumerate(panel.analytes):
            if not panel.eval_mask[:, f].any():
                continue
            stem = f"{panel.panel_id}_{name}"
            path = out / f"{stem}.svg"
            overlay_plot(panel, pred, f, path)
            written["overlays"].append(path)
            hpath = out / "histograms" / f"{stem}.svg"
            histogram_plot(panel, pred, f, hpath)
            written["histograms"].append(hpath)
    return written
