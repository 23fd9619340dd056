"""Masked losses, the sampled variational objective, Adam and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .model import Batch, ImputationBundle, ImputationModel, ModelConfig, collate, group_by_length
from .preprocessing import TimeSeriesPanel
from .variational import Prior, complexity_cost

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_epoch: int = 300
    n_sample: int = 2
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    prior_kind: str = "mixture"
    prior_pi: float = 0.5
    prior_sigma1: float = 1.0
    prior_sigma2: float = 0.0025
    prior_tau: float = 1.0
    variant: str = "bayes"
    seed: int = 0
    patience: Optional[int] = 30
    validation_fraction: float = 0.2
    grad_clip: Optional[float] = 5.0
    kl_scaling: str = "per-cell"
    hidden: int = 32
    context: int = 16
    context_hidden: int = 16
    cross_hidden: int = 4
    rho_init: float = -5.0
    bayesian_gru: bool = False
    fusion_input: str = "gamma"
    t_max: float = 2000.0

    def __post_init__(self):
        if self.n_sample < 1:
            raise ContractError(f"n_sample must be >= 1, got {self.n_sample}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ContractError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.kl_scaling not in ("per-cell", "raw"):
            raise ContractError(f"kl_scaling must be per-cell or raw, got {self.kl_scaling!r}")
        self.prior()  # validates the prior fields

    def prior(self) -> Prior:
        if self.prior_kind == "gaussian":
            return Prior.gaussian(self.prior_tau)
        return Prior(kind=self.prior_kind, pi=self.prior_pi, sigma1=self.prior_sigma1, sigma2=self.prior_sigma2)

    def model_config(self, n_features: int) -> ModelConfig:
        return ModelConfig(
            n_features=n_features,
            variant=self.variant,
            hidden=self.hidden,
            context=self.context,
            context_hidden=self.context_hidden,
            cross_hidden=self.cross_hidden,
            rho_init=self.rho_init,
            prior=self.prior(),
            bayesian_gru=self.bayesian_gru,
            fusion_input=self.fusion_input,
            t_max=self.t_max,
        )

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]


@dataclass
class LossReport:
    epoch: int
    split: str
    loss_y: float
    loss_x_hat: float
    loss_z: float
    complexity: float

    @property
    def likelihood(self) -> float:
        return self.loss_y + self.loss_x_hat + self.loss_z

    @property
    def total(self) -> float:
        return self.likelihood + self.complexity


# ------------------------------------------------------------------- losses


def masked_msd(x, y, m) -> Tensor:
    """``||M * (X - Y)||_F^2 / ||M||_F^2`` for a binary mask ``M``."""
    m_arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    count = float(np.sum(m_arr * m_arr))
    if count == 0:
        raise ContractError("masked_msd: mask selects no cells")
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    return ad.scale(ad.sum(Tensor(m_arr) * ad.square(x - y)), 1.0 / count)


def cell_weights(batch: Batch, n_panels: int) -> np.ndarray:
    """Row weights that turn a weighted squared-error sum into a mean of per-panel MSDs."""
    counts = batch.mask.reshape(batch.T, batch.P, -1).sum(axis=(0, 2))
    if np.any(counts == 0):
        raise ContractError("a panel has no observed cells to train on")
    per_panel = 1.0 / (counts * n_panels)
    return batch.mask * np.tile(per_panel, batch.T)[:, None]


def likelihood_terms(bundle: ImputationBundle, batch: Batch, weights: np.ndarray) -> tuple:
    """``(L(Y), L(X_hat), L(Z))`` against the observed cells only."""
    target = Tensor(batch.values)
    w = Tensor(weights)
    return tuple(ad.sum(w * ad.square(est - target)) for est in (bundle.y, bundle.x_hat, bundle.z_hat))


def likelihood_cost(bundle: ImputationBundle, batch: Batch) -> Tensor:
    l_y, l_x, l_z = likelihood_terms(bundle, batch, cell_weights(batch, batch.P))
    return l_y + l_x + l_z


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = math.sqrt(float(np.sum([np.sum(p.grad**2) for p in params if p.grad is not None])))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------- training


@dataclass
class TrainingContext:
    """Everything one training run owns besides the model itself."""

    cfg: TrainConfig
    batches: list
    n_panels: int
    n_cells: int
    weights: list
    noise: np.random.Generator
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def build(cls, panels: Sequence[TimeSeriesPanel], cfg: TrainConfig, noise: np.random.Generator):
        batches = [collate(group, cfg.t_max) for group in group_by_length(panels)]
        n = len(panels)
        return cls(
            cfg=cfg,
            batches=batches,
            n_panels=n,
            n_cells=int(sum(p.T * p.F for p in panels)),
            weights=[cell_weights(b, n) for b in batches],
            noise=noise,
        )

    @property
    def kl_scale(self) -> float:
        return 1.0 / self.n_cells if self.cfg.kl_scaling == "per-cell" else 1.0


def sampled_objective(model: ImputationModel, ctx: TrainingContext, epsilons: Optional[list] = None) -> tuple:
    """Mean over Monte-Carlo samples of likelihood plus scaled complexity cost.

    Returns ``(objective, [L(Y), L(X_hat), L(Z), complexity])`` where the parts
    are plain floats averaged over samples. ``epsilons`` (one dict per sample)
    freezes the weight noise.
    """
    vts = model.variational_tensors()
    n_sample = ctx.cfg.n_sample if vts else 1
    total = Tensor(0.0)
    parts = np.zeros(4)
    for i in range(n_sample):
        eps = None if epsilons is None else epsilons[i]
        thetas = model.sample_weights(ctx.noise, eps) if vts else []
        terms = [Tensor(0.0), Tensor(0.0), Tensor(0.0)]
        for batch, w in zip(ctx.batches, ctx.weights):
            bundle = model.forward(batch)
            for k, term in enumerate(likelihood_terms(bundle, batch, w)):
                terms[k] = terms[k] + term
        cx = ad.scale(complexity_cost(vts, thetas), ctx.kl_scale) if vts else Tensor(0.0)
        for k, term in enumerate(terms + [cx]):
            parts[k] += term.item()
            total = total + term
    return ad.scale(total, 1.0 / n_sample), parts / n_sample


def train_epoch(model: ImputationModel, ctx: TrainingContext, epoch: int) -> LossReport:
    """One pass of Monte-Carlo sampling, a backward pass and one Adam step."""
    params = model.parameters()
    ad.zero_grad(params)
    objective, parts = sampled_objective(model, ctx)
    names = ("L(Y)", "L(X_hat)", "L(Z)", "complexity")
    for name, value in zip(names, parts):
        if not math.isfinite(value):
            raise NumericError(f"epoch {epoch}: non-finite {name} term ({value})")
    ad.backward(objective)
    if ctx.cfg.grad_clip:
        norm = clip_global_norm(params, ctx.cfg.grad_clip)
        if not math.isfinite(norm):
            raise NumericError(f"epoch {epoch}: non-finite gradient norm")
    adam_step(
        params, [p.grad for p in params], ctx.adam, ctx.cfg.learning_rate,
        (ctx.cfg.adam_beta1, ctx.cfg.adam_beta2), ctx.cfg.adam_eps,
    )
    model.apply_masks()
    return LossReport(epoch, "train", *parts)


def evaluation_loss(model: ImputationModel, batches: Sequence[Batch], weights: Sequence[np.ndarray], epoch: int = 0,
                    split: str = "validation") -> LossReport:
    """Likelihood terms with every variational weight at its mean."""
    model.use_mean_weights()
    parts = np.zeros(3)
    for batch, w in zip(batches, weights):
        bundle = model.forward(batch)
        parts += [t.item() for t in likelihood_terms(bundle, batch, w)]
    return LossReport(epoch, split, *parts, complexity=0.0)


def snapshot(model: ImputationModel) -> dict:
    return {name: t.data.copy() for name, t in model.named_tensors()}


def restore(model: ImputationModel, state: dict) -> None:
    for name, t in model.named_tensors():
        t.data[...] = state[name]


@dataclass
class EpochRecord:
    epoch: int
    train_likelihood: float
    validation_likelihood: Optional[float]
    complexity: float
    total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def split_panels(panels: Sequence[TimeSeriesPanel], fraction: float, rng: np.random.Generator) -> tuple:
    n = len(panels)
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    order = rng.permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [p for i, p in enumerate(panels) if i not in val_idx]
    val = [p for i, p in enumerate(panels) if i in val_idx]
    return train, val


def seed_streams(seed: int) -> tuple:
    """Independent generators for (data split, weight noise)."""
    split_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(split_seq), np.random.default_rng(noise_seq)


def fit(model: ImputationModel, panels: Sequence[TimeSeriesPanel], cfg: TrainConfig,
        metrics_path=None, progress=None) -> tuple:
    """Train on a train/validation split of ``panels``; returns ``(model, history)``.

    Early stopping fires after ``cfg.patience`` epochs without a new best
    validation likelihood and restores the best parameters seen.
    """
    if len(panels) < 2:
        raise ContractError("fit needs at least two panels (one is held out for validation)")
    split_rng, noise = seed_streams(cfg.seed)
    train, val = split_panels(panels, cfg.validation_fraction, split_rng)
    ctx = TrainingContext.build(train, cfg, noise)
    val_batches = [collate(g, cfg.t_max) for g in group_by_length(val)]
    val_weights = [cell_weights(b, len(val)) for b in val_batches]
    history = []
    best, best_state, stale = math.inf, None, 0
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(1, cfg.n_epoch + 1):
            # non-finite values are caught explicitly and raised as NumericError
            with np.errstate(all="ignore"):
                report = train_epoch(model, ctx, epoch)
                val_report = evaluation_loss(model, val_batches, val_weights, epoch)
            if not math.isfinite(val_report.likelihood):
                raise NumericError(f"epoch {epoch}: non-finite validation likelihood ({val_report.likelihood})")
            record = EpochRecord(epoch, report.likelihood, val_report.likelihood, report.complexity, report.total)
            history.append(record)
            if sink is not None:
                sink.write(record.to_json() + "\n")
                sink.flush()
            if progress is not None:
                progress(record)
            if val_report.likelihood < best:
                best, best_state, stale = val_report.likelihood, snapshot(model), 0
            else:
                stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info("early stop at epoch %d, restoring best validation loss %.6f", epoch, best)
                restore(model, best_state)
                break
    finally:
        if sink is not None:
            sink.close()
    return model, history


def train(panels: Sequence[TimeSeriesPanel], cfg: TrainConfig, metrics_path=None, progress=None) -> tuple:
    """Build a fresh model for ``panels`` and fit it."""
    model = ImputationModel(cfg.model_config(panels[0].F), seed=cfg.seed)
    return fit(model, panels, cfg, metrics_path=metrics_path, progress=progress)
