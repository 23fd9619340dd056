"""Linear, MLP, LSTM and GRU building blocks with point or variational weights."""
from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .variational import Prior, VariationalTensor


class Weight:
    """A trainable tensor that is either a plain point estimate or variational."""

    def __init__(
        self,
        init: np.ndarray,
        name: str,
        variational: bool = False,
        prior: Optional[Prior] = None,
        rho_init: float = -5.0,
        mask: Optional[np.ndarray] = None,
    ):
        self.name = name
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(np.shape(init))
        self.variational = variational
        if variational:
            self.vt: Optional[VariationalTensor] = VariationalTensor(
                init, rho_init, prior or Prior(), mask=self.mask, name=name
            )
            self.point: Optional[Tensor] = None
        else:
            self.vt = None
            data = np.array(init, dtype=np.float64)
            if self.mask is not None:
                data = data * self.mask
            self.point = Tensor(data, requires_grad=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.vt.shape if self.variational else self.point.shape

    def value(self) -> Tensor:
        if self.variational:
            return self.vt.value()
        if self.mask is not None:
            return self.point * Tensor(self.mask)
        return self.point

    def tensors(self) -> Iterator[tuple]:
        """Yield ``(path, tensor)`` for every trainable leaf."""
        if self.variational:
            yield f"{self.name}.mu", self.vt.mu
            yield f"{self.name}.rho", self.vt.rho
        else:
            yield self.name, self.point

    def apply_mask(self) -> None:
        if self.mask is None:
            return
        if self.variational:
            self.vt.apply_mask()
        else:
            self.point.data *= self.mask


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Anything that owns :class:`Weight` objects, possibly through children."""

    def weights(self) -> Iterator[Weight]:
        for value in vars(self).values():
            if isinstance(value, Weight):
                yield value
            elif isinstance(value, Module):
                yield from value.weights()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.weights()

    def variational_tensors(self) -> list:
        return [w.vt for w in self.weights() if w.variational]


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored ``out x in``.

    ``mask`` (``out x in``, 0/1) pins entries of ``W`` to exactly zero, e.g. a
    zero diagonal so no output reads its own input.
    """

    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        name: str,
        variational: bool = False,
        prior: Optional[Prior] = None,
        rho_init: float = -5.0,
        mask: Optional[np.ndarray] = None,
        weight_init: Optional[np.ndarray] = None,
        bias_init: Optional[np.ndarray] = None,
    ):
        self.n_in = n_in
        self.n_out = n_out
        bound = 1.0 / math.sqrt(n_in)
        w0 = _uniform(rng, bound, (n_out, n_in)) if weight_init is None else weight_init
        b0 = _uniform(rng, bound, (1, n_out)) if bias_init is None else np.reshape(bias_init, (1, n_out))
        kw = dict(variational=variational, prior=prior, rho_init=rho_init)
        self.W = Weight(w0, f"{name}.W", mask=mask, **kw)
        self.b = Weight(b0, f"{name}.b", **kw)

    @property
    def variational(self) -> bool:
        return self.W.variational

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[1] != layer.n_in:
        raise ShapeError(f"linear: input {x.shape} but layer expects {layer.n_in} features")
    return ad.linear(x, layer.W.value(), layer.b.value())


def mlp_forward(layers: Sequence[Linear], x: Tensor, activations: Optional[Sequence[str]] = None) -> Tensor:
    """Apply ``layers`` in turn; by default ReLU between layers and none after the last."""
    if activations is None:
        activations = ["relu"] * (len(layers) - 1) + [None]
    for i in range(len(layers) - 1):
        if layers[i].n_out != layers[i + 1].n_in:
            raise ShapeError(
                f"mlp: layer {i} emits {layers[i].n_out} but layer {i + 1} takes {layers[i + 1].n_in}"
            )
    for layer, act in zip(layers, activations):
        x = linear_forward(layer, x)
        if act:
            x = ad.elementwise(act, x)
    return x


class MLP(Module):
    def __init__(self, layers: Sequence[Linear]):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, x)


class LstmCell(Module):
    """LSTM cell; gate blocks are stacked in the order input, forget, cell, output.

    The weight over ``[x; h]`` is kept as two blocks, ``W_ih`` and ``W_hh``, so
    the input projection of a whole sequence can be computed in one product.
    """

    def __init__(
        self,
        n_in: int,
        hidden: int,
        rng: np.random.Generator,
        name: str,
        variational: bool = False,
        prior: Optional[Prior] = None,
        rho_init: float = -5.0,
    ):
        self.n_in = n_in
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        b0 = _uniform(rng, bound, (1, 4 * hidden))
        b0[0, hidden:2 * hidden] = 1.0
        kw = dict(variational=variational, prior=prior, rho_init=rho_init)
        self.W_ih = Weight(_uniform(rng, bound, (4 * hidden, n_in)), f"{name}.W_ih", **kw)
        self.W_hh = Weight(_uniform(rng, bound, (4 * hidden, hidden)), f"{name}.W_hh", **kw)
        self.b = Weight(b0, f"{name}.b", **kw)

    def project_input(self, x: Tensor) -> Tensor:
        """Input contribution ``x W_ih^T + b`` to the gate pre-activations."""
        if x.shape[1] != self.n_in:
            raise ShapeError(f"lstm: input {x.shape} but cell expects {self.n_in} features")
        return ad.linear(x, self.W_ih.value(), self.b.value())

    def step_projected(self, px: Tensor, h: Tensor, c: Tensor) -> tuple:
        H = self.hidden
        z = px + ad.linear(h, self.W_hh.value())
        hc = ad.lstm_gates(z, c)
        return ad.cols(hc, 0, H), ad.cols(hc, H, 2 * H)


def lstm_step(cell: LstmCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple:
    H = cell.hidden
    if h_prev.shape != (x_t.shape[0], H) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm: state shapes {h_prev.shape}, {c_prev.shape} do not match hidden size {H}")
    return cell.step_projected(cell.project_input(x_t), h_prev, c_prev)


class GruCell(Module):
    """GRU cell; gate blocks stacked as update, reset, candidate.

    Candidate: ``tanh(W_ih[n] x + b[n] + W_hh[n] (r * h))``, i.e. the reset gate is
    applied to the previous state before its projection.
    """

    def __init__(
        self,
        n_in: int,
        hidden: int,
        rng: np.random.Generator,
        name: str,
        variational: bool = False,
        prior: Optional[Prior] = None,
        rho_init: float = -5.0,
    ):
        self.n_in = n_in
        self.hidden = hidden
        bound = 1.0 / math.sqrt(hidden)
        kw = dict(variational=variational, prior=prior, rho_init=rho_init)
        self.W_ih = Weight(_uniform(rng, bound, (3 * hidden, n_in)), f"{name}.W_ih", **kw)
        self.W_hh = Weight(_uniform(rng, bound, (3 * hidden, hidden)), f"{name}.W_hh", **kw)
        self.b = Weight(_uniform(rng, bound, (1, 3 * hidden)), f"{name}.b", **kw)

    def project_input(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.n_in:
            raise ShapeError(f"gru: input {x.shape} but cell expects {self.n_in} features")
        return ad.linear(x, self.W_ih.value(), self.b.value())

    def recurrent_blocks(self) -> tuple:
        """Split ``W_hh`` into the gate block and the candidate block (once per sequence)."""
        H = self.hidden
        w = self.W_hh.value()
        return ad.rows(w, 0, 2 * H), ad.rows(w, 2 * H, 3 * H)

    def step_projected(self, px: Tensor, h: Tensor, blocks: Optional[tuple] = None) -> Tensor:
        H = self.hidden
        w_zr, w_n = blocks if blocks is not None else self.recurrent_blocks()
        zr = ad.cols(px, 0, 2 * H) + ad.linear(h, w_zr)
        z = ad.sigmoid(ad.cols(zr, 0, H))
        r = ad.sigmoid(ad.cols(zr, H, 2 * H))
        n = ad.tanh(ad.cols(px, 2 * H, 3 * H) + ad.linear(r * h, w_n))
        return h + z * (n - h)


def gru_step(cell: GruCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    if h_prev.shape != (x_t.shape[0], cell.hidden):
        raise ShapeError(f"gru: state shape {h_prev.shape} does not match hidden size {cell.hidden}")
    return cell.step_projected(cell.project_input(x_t), h_prev)
