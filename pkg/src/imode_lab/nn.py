"""Layers (two-layer MLP, GRU cell), initialization and RMSprop."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

HIDDEN = 40


# ------------------------------------------------------------ initialization


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    group: str = ""


def init_params(specs: Sequence[ParamSpec], seed: int, store: ParamStore | None = None) -> ParamStore:
    """Matrices uniform in +-1/sqrt(fan_in), vectors (biases) zero."""
    rng = np.random.default_rng(seed)
    store = ParamStore() if store is None else store
    for spec in specs:
        if len(spec.shape) == 2:
            bound = 1.0 / np.sqrt(spec.shape[1])
            value = rng.uniform(-bound, bound, size=spec.shape)
        else:
            value = np.zeros(spec.shape)
        store.add(spec.name, value, spec.group)
    return store


# --------------------------------------------------------------------- MLP


def mlp_specs(prefix: str, n_in: int, n_out: int, hidden: int = HIDDEN, group: str = "") -> list[ParamSpec]:
    if hidden <= 0:
        raise ValueError("hidden width must be positive")
    return [
        ParamSpec(f"{prefix}.W1", (hidden, n_in), group),
        ParamSpec(f"{prefix}.b1", (hidden,), group),
        ParamSpec(f"{prefix}.W2", (n_out, hidden), group),
        ParamSpec(f"{prefix}.b2", (n_out,), group),
    ]


@dataclass
class Mlp:
    """``W2 @ leaky_relu(W1 @ x + b1) + b2``."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    slope: float = ad.LEAKY_SLOPE

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> Mlp:
        return cls(store[f"{prefix}.W1"], store[f"{prefix}.b1"], store[f"{prefix}.W2"], store[f"{prefix}.b2"])

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(m: Mlp, x: Tensor) -> Tensor:
    if x.shape[-1] != m.n_in:
        raise ValueError(f"MLP expects width {m.n_in}, got {x.shape[-1]}")
    hidden = ad.leaky_relu(ad.linear(x, m.W1, m.b1), m.slope)
    return ad.linear(hidden, m.W2, m.b2)


# --------------------------------------------------------------------- GRU


def gru_specs(prefix: str, n_in: int, n_hidden: int, group: str = "") -> list[ParamSpec]:
    # rows ordered [reset; update; candidate]
    return [
        ParamSpec(f"{prefix}.Wx", (3 * n_hidden, n_in), group),
        ParamSpec(f"{prefix}.bx", (3 * n_hidden,), group),
        ParamSpec(f"{prefix}.Wh", (3 * n_hidden, n_hidden), group),
        ParamSpec(f"{prefix}.bh", (3 * n_hidden,), group),
    ]


@dataclass
class GruCell:
    Wx: Tensor
    bx: Tensor
    Wh: Tensor
    bh: Tensor

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> GruCell:
        return cls(store[f"{prefix}.Wx"], store[f"{prefix}.bx"], store[f"{prefix}.Wh"], store[f"{prefix}.bh"])

    @property
    def n_in(self) -> int:
        return self.Wx.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.Wh.shape[1]

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        return gru_step(self, h, x)


def gru_step(c: GruCell, h: Tensor, x: Tensor) -> Tensor:
    """One GRU update ``h' = (1 - u) * h + u * candidate``."""
    n = c.n_hidden
    if h.shape[-1] != n or x.shape[-1] != c.n_in:
        raise ValueError(f"GRU expects h:{n}, x:{c.n_in}; got h:{h.shape[-1]}, x:{x.shape[-1]}")
    gx = ad.linear(x, c.Wx, c.bx)
    gh = ad.linear(h, c.Wh, c.bh)
    reset = ad.sigmoid(ad.take(gx, 0, n) + ad.take(gh, 0, n))
    update = ad.sigmoid(ad.take(gx, n, 2 * n) + ad.take(gh, n, 2 * n))
    candidate = ad.tanh(ad.take(gx, 2 * n, 3 * n) + reset * ad.take(gh, 2 * n, 3 * n))
    return h + update * (candidate - h)


# ----------------------------------------------------------------- RMSprop


@dataclass
class RmspropState:
    lr: float = 1e-3
    rho: float = 0.99
    eps: float = 1e-8
    sq_avg: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def rmsprop_step(state: RmspropState, params: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
    """In-place update: ``v <- rho v + (1-rho) g^2``, ``p <- p - lr g / (sqrt(v) + eps)``."""
    missing = [k for k in params.names() if k not in grads]
    if missing:
        raise KeyError(f"missing gradients for {missing}")
    for name, p in params.items():
        g = grads[name]
        v = state.sq_avg.get(name)
        if v is None:
            v = np.zeros_like(p.value)
        v = state.rho * v + (1.0 - state.rho) * g * g
        state.sq_avg[name] = v
        p.value = p.value - state.lr * g / (np.sqrt(v) + state.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the original norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * factor
    return total
