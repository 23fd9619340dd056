from __future__ import annotations

import numpy as np
import pytest

from vimpute import autodiff as ad
from vimpute.model import ImputationModel, ModelConfig
from vimpute.preprocessing import MaskPlan, apply_mask
from vimpute.synthetic import generate_synthetic


def fd_max_rel_error(loss_fn, tensors, h=1e-6, entries=None):
    """Largest |autodiff - central difference| / max(1, |central difference|).

    ``loss_fn`` rebuilds the graph and returns a 1x1 Tensor. ``entries`` maps a
    tensor index to the flat positions to probe (default: all of them).
    """
    for t in tensors:
        t.grad = None
    ad.backward(loss_fn())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for k, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        idx = range(flat.size) if entries is None else entries[k]
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * h)
            err = abs(analytic[k].reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def masked_synthetic(n, T=40, F=3, seed=0, rate=0.05, mode="individual", length=1):
    plan = MaskPlan(mode=mode, rate=rate, length=length, seed=seed)
    panels = generate_synthetic(n, T, F, seed=seed)
    streams = np.random.SeedSequence(seed).spawn(n)
    return [apply_mask(p, plan, np.random.default_rng(s)) for p, s in zip(panels, streams)]


def tiny_config(variant="bayes", F=3, **kw):
    base = dict(hidden=4, context=4, context_hidden=4, cross_hidden=2)
    base.update(kw)
    return ModelConfig(n_features=F, variant=variant, **base)


@pytest.fixture
def tiny_panels():
    return masked_synthetic(3, T=12, F=3, seed=3, rate=0.1)


@pytest.fixture
def tiny_model():
    return ImputationModel(tiny_config(), seed=5)
