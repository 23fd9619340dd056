"""Desk-scale synthetic corpus of correlated sinusoids with pre-existing gaps."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .preprocessing import TimeSeriesPanel


def synthetic_series(T: int, F: int, rng: np.random.Generator, noise_level: float) -> np.ndarray:
    """One ``T x F`` block: features share a slow common wave, the last one is half the first."""
    t = np.arange(T, dtype=float)
    common = np.sin(2 * np.pi * t / rng.uniform(40, 90) + rng.uniform(0, 2 * np.pi))
    x = np.empty((T, F))
    for f in range(F - 1):
        period = rng.uniform(15, 45)
        amp = rng.uniform(0.5, 2.0)
        x[:, f] = (
            amp * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
            + rng.uniform(0.3, 1.0) * common
            + rng.uniform(-1, 1)
        )
    x[:, F - 1] = 0.5 * x[:, 0]
    if noise_level > 0:
        x = x + noise_level * rng.standard_normal((T, F))
    return x


def generate_synthetic(
    n_panels: int,
    T: int,
    F: int,
    seed: int = 0,
    noise_level: float = 0.05,
    missing_rate: float = 0.16,
    analytes: Optional[Sequence[str]] = None,
) -> list:
    """Panels with ``round(missing_rate * T)`` missing cells in every feature column."""
    if T < 10 or F < 2:
        raise ContractError(f"synthetic panels need T >= 10 and F >= 2, got T={T}, F={F}")
    names = tuple(analytes) if analytes is not None else tuple(f"A{f + 1}" for f in range(F))
    rng = np.random.default_rng(seed)
    n_missing = int(round(missing_rate * T))
    panels = []
    for p in range(n_panels):
        x = synthetic_series(T, F, rng, noise_level)
        for f in range(F):
            x[rng.choice(T, size=n_missing, replace=False), f] = np.nan
        panels.append(TimeSeriesPanel(f"p{p:03d}", x, np.arange(T, dtype=float), names))
    return panels
