"""Context-aware bidirectional recurrent imputation fused with cross-feature imputation.

Panels of equal length are processed together. Every per-cell quantity is a
``(T * P) x F`` matrix in time-major row order (row ``t * P + p`` is panel
``p`` at step ``t``), so one recurrence step reads a contiguous ``P x F`` block.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DataError
from .layers import MLP, GruCell, Linear, LstmCell, Module, linear_forward, mlp_forward
from .preprocessing import DecayModule, TimeSeriesPanel, decay_blend, denormalize, last_observation, prepare
from .variational import Prior

VARIANTS = ("bayes", "partial", "catsi")


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    variant: str = "bayes"
    hidden: int = 32
    context: int = 16
    context_hidden: int = 16
    cross_hidden: int = 4
    rho_init: float = -5.0
    prior: Prior = field(default_factory=Prior)
    bayesian_gru: bool = False
    fusion_input: str = "gamma"
    t_max: float = 2000.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.fusion_input not in ("gamma", "delta"):
            raise ContractError(f"fusion_input must be gamma or delta, got {self.fusion_input!r}")
        if self.context < 2:
            raise ContractError("context size must be at least 2")


# ------------------------------------------------------------------ batches


def to_rows(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Stack P arrays of shape ``T x F`` into time-major ``(T * P) x F``."""
    stacked = np.stack(arrays, axis=1)
    T, P, F = stacked.shape
    return stacked.reshape(T * P, F)


def from_rows(x: np.ndarray, n_panels: int) -> np.ndarray:
    """Inverse of :func:`to_rows`: returns ``P x T x F``."""
    TP, F = x.shape
    return x.reshape(TP // n_panels, n_panels, F).transpose(1, 0, 2)


def summary_statistics(panel: TimeSeriesPanel, t_max: float) -> np.ndarray:
    """``[mean (F), std (F), missing rate (F), T / t_max]`` of a normalized panel."""
    s = panel.norm
    return np.concatenate([s.mean, s.std, s.missing_rate, [s.length / t_max]])


@dataclass
class Batch:
    panels: list
    prepared: list
    T: int
    values: np.ndarray
    mask: np.ndarray
    gaps: np.ndarray
    last_obs: np.ndarray
    mean: np.ndarray
    stats: np.ndarray

    @property
    def P(self) -> int:
        return len(self.panels)


def collate(panels: Sequence[TimeSeriesPanel], t_max: float = 2000.0) -> Batch:
    """Prepare raw panels and stack them for a joint forward pass."""
    if not panels:
        raise DataError("empty panel list")
    T = panels[0].T
    if any(p.T != T for p in panels):
        raise DataError("panels in one batch must share their length; group them by length first")
    if T < 2:
        raise DataError("bidirectional imputation needs at least two time steps")
    F = panels[0].F
    if any(p.F != F for p in panels):
        raise DataError("panels disagree on the number of features")
    prepared = [prepare(p) for p in panels]
    return Batch(
        panels=list(panels),
        prepared=prepared,
        T=T,
        values=to_rows([np.nan_to_num(p.values) for p in prepared]),
        mask=to_rows([p.obs_mask.astype(np.float64) for p in prepared]),
        gaps=to_rows([p.gaps for p in prepared]),
        last_obs=to_rows([last_observation(p) for p in prepared]),
        mean=to_rows([np.broadcast_to(p.norm.mean, (T, F)) for p in prepared]),
        stats=np.stack([summary_statistics(p, t_max) for p in prepared]),
    )


def group_by_length(panels: Sequence[TimeSeriesPanel]) -> list:
    groups: dict = {}
    for p in panels:
        groups.setdefault(p.T, []).append(p)
    return [groups[k] for k in sorted(groups)]


# ------------------------------------------------------------------ results


@dataclass
class ImputationBundle:
    """Model outputs in scaled units, each ``(T * P) x F``."""

    x_hat: Tensor
    z_hat: Tensor
    beta: Tensor
    y: Tensor
    gamma: Tensor
    x_tilde: Tensor


@dataclass
class ContextVector:
    r_mlp: Tensor
    r_gru: Tensor
    r: Tensor


# -------------------------------------------------------------- components


def build_context(stats: Tensor, gru_inputs: Tensor, T: int, mlp: MLP, gru: GruCell) -> ContextVector:
    """Concatenate an MLP summary of panel statistics with the last GRU state."""
    if T < 1:
        raise DataError("empty panel")
    P = stats.shape[0]
    r_mlp = mlp(stats)
    px = gru.project_input(gru_inputs)
    blocks = gru.recurrent_blocks()
    h = Tensor(np.zeros((P, gru.hidden)))
    for t in range(T):
        h = gru.step_projected(ad.rows(px, t * P, (t + 1) * P), h, blocks)
    return ContextVector(r_mlp=r_mlp, r_gru=h, r=ad.concat(r_mlp, h, axis=1))


def recurrent_impute(
    x_tilde: Tensor,
    r: Tensor,
    T: int,
    fwd: LstmCell,
    bwd: LstmCell,
    init_fwd: Linear,
    init_bwd: Linear,
    out: Linear,
) -> Tensor:
    """Estimate each step from the forward state before it and the backward state after it.

    The forward state used at step ``t`` has consumed steps ``0..t-1``; the
    backward one has consumed ``T-1..t+1``. Both start from ``h0 = W r + b``,
    ``c0 = tanh(h0)``.
    """
    if T < 2:
        raise DataError("bidirectional imputation needs at least two time steps")
    P = r.shape[0]
    inputs = ad.concat(x_tilde, ad.repeat_rows(r, T), axis=1)

    def run(cell: LstmCell, init: Linear, order) -> list:
        h = linear_forward(init, r)
        c = ad.tanh(h)
        px = cell.project_input(inputs)
        states = [h]
        for t in order:
            h, c = cell.step_projected(ad.rows(px, t * P, (t + 1) * P), h, c)
            states.append(h)
        return states

    hf = run(fwd, init_fwd, range(0, T - 1))
    hb = run(bwd, init_bwd, range(T - 1, 0, -1))
    h_fwd = ad.concat(hf, axis=0)
    h_bwd = ad.concat([hb[T - 1 - t] for t in range(T)], axis=0)
    return linear_forward(out, ad.concat(h_fwd, h_bwd, axis=1))


def cross_feature_impute(x_tilde: Tensor, pre: Linear, mlp: MLP) -> Tensor:
    """Estimate each feature from the others; ``pre`` has a zero diagonal."""
    return mlp(linear_forward(pre, x_tilde))


def fuse(x_hat: Tensor, z_hat: Tensor, gate_input: Tensor, mask: Tensor, layer: Linear) -> tuple:
    """``beta = sigmoid(W [gamma; m] + b)``, ``y = beta * z + (1 - beta) * x``."""
    beta = ad.sigmoid(linear_forward(layer, ad.concat(gate_input, mask, axis=1)))
    y = beta * z_hat + (1.0 - beta) * x_hat
    return beta, y


def _block_masks(F: int, K: int) -> tuple:
    owner = np.repeat(np.arange(F), K)
    first = (owner[:, None] == np.arange(F)[None, :]).astype(float)
    return first, first.T.copy()


class ImputationModel(Module):
    """The full network. Which weights are variational depends on ``cfg.variant``.

    bayes: context MLP, initial-state maps, both LSTMs, recurrent output layer
    and cross-feature MLP. partial: the last context-MLP layer, the recurrent
    output layer and the last cross-feature layer. catsi: none. The decay
    module, the cross-feature pre-layer and the fusion gate stay deterministic,
    and so does the context GRU unless ``bayesian_gru`` is set.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        F, H, K = cfg.n_features, cfg.hidden, cfg.cross_hidden
        c_mlp = cfg.context // 2
        c_gru = cfg.context - c_mlp
        full = cfg.variant == "bayes"
        some = cfg.variant in ("bayes", "partial")

        def kw(flag: bool) -> dict:
            return dict(variational=flag, prior=cfg.prior, rho_init=cfg.rho_init)

        self.decay = DecayModule(F)
        self.context_mlp = MLP([
            Linear(3 * F + 1, cfg.context_hidden, rng, "context_mlp.0", **kw(full)),
            Linear(cfg.context_hidden, c_mlp, rng, "context_mlp.1", **kw(some)),
        ])
        self.context_gru = GruCell(3 * F, c_gru, rng, "context_gru", **kw(cfg.bayesian_gru and some))
        self.init_fwd = Linear(cfg.context, H, rng, "init_fwd", **kw(full))
        self.init_bwd = Linear(cfg.context, H, rng, "init_bwd", **kw(full))
        self.lstm_fwd = LstmCell(F + cfg.context, H, rng, "lstm_fwd", **kw(full))
        self.lstm_bwd = LstmCell(F + cfg.context, H, rng, "lstm_bwd", **kw(full))
        self.recurrent_out = Linear(2 * H, F, rng, "recurrent_out", **kw(some))
        off_diag = 1.0 - np.eye(F)
        pre_bound = 1.0 / np.sqrt(max(F - 1, 1))
        self.cross_pre = Linear(
            F, F, rng, "cross_pre", mask=off_diag,
            weight_init=rng.uniform(-pre_bound, pre_bound, (F, F)),
        )
        m1, m2 = _block_masks(F, K)
        self.cross_mlp = MLP([
            Linear(F, F * K, rng, "cross_mlp.0", mask=m1,
                   weight_init=rng.uniform(-1.0, 1.0, (F * K, F)), **kw(full)),
            Linear(F * K, F, rng, "cross_mlp.1", mask=m2,
                   weight_init=rng.uniform(-1 / np.sqrt(K), 1 / np.sqrt(K), (F, F * K)), **kw(some)),
        ])
        self.fusion = Linear(2 * F, F, rng, "fusion")

    # -- parameter access

    def named_tensors(self) -> list:
        """``(path, tensor)`` for every trainable leaf, in a stable order."""
        return [item for w in self.weights() for item in w.tensors()]

    def parameters(self) -> list:
        return [t for _, t in self.named_tensors()]

    def sample_weights(self, rng: Optional[np.random.Generator] = None, epsilons: Optional[dict] = None) -> list:
        """Draw a fresh weight sample for every variational tensor; returns the samples."""
        thetas = []
        for vt in self.variational_tensors():
            eps = None if epsilons is None else epsilons[vt.name]
            thetas.append(vt.sample(rng, epsilon=eps))
        return thetas

    def use_mean_weights(self) -> list:
        return [vt.use_mean() for vt in self.variational_tensors()]

    def apply_masks(self) -> None:
        for w in self.weights():
            w.apply_mask()

    # -- forward

    def forward(self, batch: Batch) -> ImputationBundle:
        mask = Tensor(batch.mask)
        gaps = Tensor(batch.gaps)
        gamma = self.decay.gamma(gaps)
        x_tilde = decay_blend(batch.values, batch.mask, batch.last_obs, batch.mean, gamma)
        gru_inputs = ad.concat([x_tilde, mask, gaps], axis=1)
        ctx = build_context(Tensor(batch.stats), gru_inputs, batch.T, self.context_mlp, self.context_gru)
        x_hat = recurrent_impute(
            x_tilde, ctx.r, batch.T, self.lstm_fwd, self.lstm_bwd,
            self.init_fwd, self.init_bwd, self.recurrent_out,
        )
        z_hat = cross_feature_impute(x_tilde, self.cross_pre, self.cross_mlp)
        gate = gamma if self.cfg.fusion_input == "gamma" else gaps
        beta, y = fuse(x_hat, z_hat, gate, mask, self.fusion)
        return ImputationBundle(x_hat=x_hat, z_hat=z_hat, beta=beta, y=y, gamma=gamma, x_tilde=x_tilde)

    __call__ = forward


def final_output(panel: TimeSeriesPanel, y_scaled: np.ndarray, stats) -> np.ndarray:
    """Raw observed values where observed, the denormalized estimate elsewhere."""
    raw = panel.values if not panel.normalized else denormalize(panel.values, panel.norm)
    return np.where(panel.obs_mask == 1, raw, denormalize(y_scaled, stats))


def impute_batch(model: ImputationModel, batch: Batch) -> np.ndarray:
    """Forward pass with the currently cached weights; returns ``P x T x F`` raw-unit panels."""
    bundle = model.forward(batch)
    ys = from_rows(bundle.y.data, batch.P)
    return np.stack([
        final_output(raw, ys[i], prep.norm)
        for i, (raw, prep) in enumerate(zip(batch.panels, batch.prepared))
    ])
