"""Define-by-run reverse-mode automatic differentiation over numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  Values are float64
arrays of shape ``(n,)`` (a vector), ``(B, n)`` (a batch of vectors) or
``(m, n)`` (a weight matrix).  Broadcasting is limited to what the models
need: a vector or scalar combined with a batch.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matvec",
    "linear",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "exp",
    "softplus",
    "concat",
    "take",
    "where",
    "lincomb",
    "sum_all",
    "sum_squares",
    "backward",
    "grad_check",
]

LEAKY_SLOPE = 0.01


class Tensor:
    """A node of the computation graph.

    ``value`` is the cached forward value and ``grad`` the adjoint filled in
    by :func:`backward` (``None`` until then).  Leaves created with
    ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple[Tensor, ...] = (),
        op: str = "leaf",
        backward_fn: Callable | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap an array-like as a leaf node."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _node(value, parents, op, backward_fn) -> Tensor:
    # Constant-only subgraphs carry no backward closure.
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, op, backward_fn, requires_grad=True)
    return Tensor(value, (), op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _node(
        av * bv,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _node(-x.value, (x,), "neg", lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    c = float(c)
    return _node(x.value * c, (x,), "scale", lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    factor = np.where(x.value > 0, 1.0, slope)
    return _node(x.value * factor, (x,), "leaky_relu", lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    s = 0.5 * (np.tanh(0.5 * x.value) + 1.0)
    return _node(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.value)
    return _node(y, (x,), "exp", lambda g: (g * y,))


def softplus(x: Tensor) -> Tensor:
    v = x.value
    y = np.logaddexp(0.0, v)
    s = 0.5 * (np.tanh(0.5 * v) + 1.0)
    return _node(y, (x,), "softplus", lambda g: (g * s,))


# ------------------------------------------------------------------- linear


def matvec(W: Tensor, x: Tensor) -> Tensor:
    """``W @ x`` for a vector, or row-wise ``x @ W.T`` for a batch."""
    if W.value.ndim != 2 or W.shape[1] != x.shape[-1]:
        raise ValueError(f"matvec: dimension mismatch {W.shape} @ {x.shape}")
    Wv, xv = W.value, x.value

    def backward_fn(g):
        if xv.ndim == 1:
            gW = np.outer(g, xv)
        else:
            gW = g.T @ xv
        return gW, g @ Wv

    return _node(xv @ Wv.T, (W, x), "matvec", backward_fn)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``W x + b`` (fused so one tape node covers a layer)."""
    if W.value.ndim != 2 or W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise ValueError(f"linear: dimension mismatch W{W.shape} b{b.shape} x{x.shape}")
    Wv, xv = W.value, x.value

    def backward_fn(g):
        if xv.ndim == 1:
            return g @ Wv, np.outer(g, xv), g
        return g @ Wv, g.T @ xv, g.sum(axis=0)

    return _node(xv @ Wv.T + b.value, (x, W, b), "linear", backward_fn)


# ---------------------------------------------------------------- structure


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; backward splits the adjoint by segment."""
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of nothing")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=-1)

    def backward_fn(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(value, parts, "concat", backward_fn)


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    shape = x.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _node(x.value[..., start:stop], (x,), "take", backward_fn)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``; values are copied exactly.

    A 1-D mask over a batch selects whole rows.
    """
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"where: shape mismatch {a.shape} vs {b.shape}")
    if mask.ndim == 1 and a.value.ndim == 2:
        mask = mask[:, None]
    value = np.where(mask, a.value, b.value)
    return _node(
        value,
        (a, b),
        "where",
        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


def lincomb(terms: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """Weighted sum ``sum_i c_i * t_i`` with constant coefficients."""
    terms = tuple(terms)
    coeffs = [float(c) for c in coeffs]
    if len(terms) != len(coeffs):
        raise ValueError("lincomb: terms and coefficients differ in length")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ValueError(f"lincomb: shape mismatch {shape} vs {t.shape}")
    value = coeffs[0] * terms[0].value
    for c, t in zip(coeffs[1:], terms[1:]):
        value = value + c * t.value
    return _node(value, terms, "lincomb", lambda g: tuple(c * g for c in coeffs))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.sum(x.value), (x,), "sum", lambda g: (np.full(shape, g),))


def sum_squares(x: Tensor) -> Tensor:
    v = x.value
    return _node(np.sum(v * v), (x,), "sum_squares", lambda g: (2.0 * g * v,))


# ----------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Propagate adjoints from a scalar ``loss``.

    Every node reachable from the loss gets ``.grad`` set.  When ``params`` is
    given, the returned map holds ``dLoss/dParam`` for each registered
    parameter (zeros for parameters the loss does not touch).
    """
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        g = node.grad
        if node._backward is None or g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad = parent.grad + pg
    if params is None:
        return {}
    reached = {id(node) for node in order}
    grads = {}
    for name, p in params.items():
        if id(p) not in reached or p.grad is None:
            grads[name] = np.zeros_like(p.value)
        else:
            grads[name] = p.grad.reshape(p.shape)
    return grads


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named trainable tensors, each tagged with a component group."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value, group: str = "") -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def group(self, name: str) -> str:
        return self._groups[name]

    def get_values(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._tensors.items()}

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            t = self._tensors[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.value = v.copy()

    def num_values(self) -> int:
        return sum(t.value.size for t in self._tensors.values())

    def to_dict(self) -> dict:
        return {
            k: {"shape": list(t.shape), "values": t.value.ravel().tolist(), "group": self._groups[k]}
            for k, t in self._tensors.items()
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> ParamStore:
        store = cls()
        for name, entry in payload.items():
            shape = tuple(entry["shape"])
            values = np.array(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ValueError(f"parameter {name!r}: {values.size} values for shape {shape}")
            store.add(name, values.reshape(shape), entry.get("group", ""))
        return store

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> ParamStore:
        return cls.from_dict(json.loads(text))


# ------------------------------------------------------------ gradient check


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Largest relative disagreement between backward() and central differences.

    ``f`` must rebuild its graph from the current parameter values on each
    call.  The error for each parameter array is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``, so a
    gradient is judged against its own scale.  The scale is floored at
    ``floor`` so gradients that are zero up to rounding do not divide noise
    by noise.
    ``max_coords`` samples that many coordinates per parameter.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(params.names() if names is None else names)
    grads = backward(f(), params)
    worst = 0.0
    for name in names:
        p = params[name]
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        analytic = grads[name].reshape(-1)[idx]
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().value)
            flat[i] = orig - eps
            down = float(f().value)
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * eps)
        scale_ = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale_))
    return worst
