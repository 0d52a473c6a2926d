"""Fixed-step RK4 and executors for impulsive (jump) ODE systems.

Two executors share the same event timeline type:

* :func:`run_njde` - a single state ``h`` that flows between events and is
  replaced by ``g(h, input)`` at each event (ODE-RNN style).
* :func:`run_imode` - a continuous mixing state ``h`` plus two latents
  ``z_x`` (driven by observations) and ``z_a`` (driven by interventions).
  Only the latents jump; ``h`` is never touched at an event.

States may carry a leading batch axis.  Per-episode event masks select which
rows of the batch jump at a given time.
"""

from __future__ import annotations

import csv
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

GRID_TOL = 1e-9

VectorField = Callable[[float, Tensor], Tensor]


def grid_steps(t0: float, t1: float, dt: float) -> int:
    """Number of ``dt`` steps between ``t0`` and ``t1``; both must be on the grid."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t1 < t0 - GRID_TOL:
        raise ValueError(f"interval runs backwards: {t0} -> {t1}")
    n = (t1 - t0) / dt
    k = round(n)
    if abs(n - k) > GRID_TOL * max(1.0, abs(n)):
        raise ValueError(f"interval [{t0}, {t1}] is not a whole number of dt={dt} steps")
    return max(k, 0)


def rk4_step(f: VectorField, y: Tensor, t: float, dt: float) -> Tensor:
    """Classical fourth-order Runge-Kutta step, differentiable end to end."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    half = 0.5 * dt
    k1 = f(t, y)
    k2 = f(t + half, ad.lincomb((y, k1), (1.0, half)))
    k3 = f(t + half, ad.lincomb((y, k2), (1.0, half)))
    k4 = f(t + dt, ad.lincomb((y, k3), (1.0, dt)))
    out = ad.lincomb((y, k1, k2, k3, k4), (1.0, dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0))
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError(f"non-finite state after RK4 step at t={t}")
    return out


def integrate(
    f: VectorField,
    y0: Tensor,
    t0: float,
    t1: float,
    dt: float,
    on_step: Callable[[float, Tensor], None] | None = None,
) -> tuple[Tensor, list[tuple[float, Tensor]]]:
    """Repeated RK4 over the uniform grid from ``t0`` to ``t1``.

    Returns the endpoint and the list of ``(t, y)`` grid values including
    both ends.  Grid times are ``t0 + i*dt`` (not accumulated sums).
    """
    n = grid_steps(t0, t1, dt)
    y = y0
    grid = [(t0, y0)]
    for i in range(n):
        y = rk4_step(f, y, t0 + i * dt, dt)
        t = t1 if i == n - 1 else t0 + (i + 1) * dt
        grid.append((t, y))
        if on_step is not None:
            on_step(t, y)
    return y, grid


# ------------------------------------------------------------------ events


@dataclass
class Event:
    """Something happening at time ``t``.

    ``x`` is an observation and ``a`` an intervention, each optionally
    batched; ``x_mask`` / ``a_mask`` (bool per batch row) restrict which
    episodes see it.  ``None`` masks mean every row.
    """

    t: float
    x: np.ndarray | None = None
    a: np.ndarray | None = None
    x_mask: np.ndarray | None = None
    a_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.x is None and self.a is None:
            raise ValueError(f"event at t={self.t} carries neither observation nor intervention")

    @property
    def has_x(self) -> bool:
        return self.x is not None and (self.x_mask is None or bool(np.any(self.x_mask)))

    @property
    def has_a(self) -> bool:
        return self.a is not None and (self.a_mask is None or bool(np.any(self.a_mask)))


class EventTimeline:
    """Events ordered by strictly increasing time."""

    def __init__(self, events: Iterable[Event] = ()):
        self.events = list(events)
        for prev, cur in zip(self.events, self.events[1:]):
            if not cur.t > prev.t:
                raise ValueError(f"event times must strictly increase ({prev.t} then {cur.t})")

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def times(self) -> list[float]:
        return [e.t for e in self.events]


# ------------------------------------------------------------------- state


@dataclass
class HybridState:
    h: Tensor
    z_x: Tensor
    z_a: Tensor
    t: float


@dataclass
class FlowSpec:
    """Vector fields and jump maps of the IMODE system.

    ``f_x`` / ``f_a`` may be ``None`` to denote an identically zero flow.
    """

    f_h: Callable[[Tensor, Tensor, Tensor], Tensor]
    f_x: Callable[[Tensor], Tensor] | None
    f_a: Callable[[Tensor], Tensor] | None
    g_x: Callable[[Tensor, Tensor, Tensor], Tensor]
    g_a: Callable[[Tensor, Tensor, Tensor], Tensor]


@dataclass
class StateTrace:
    """Latent norms on the integration grid plus decoded predictions.

    Norm entries are floats for single episodes and arrays for batches.
    ``norm_zx`` / ``norm_za`` stay ``None`` for single-state (NJDE) runs.
    ``jumps`` keeps ``(t, h_before, h_after)`` values for every event.
    """

    t: list[float] = field(default_factory=list)
    norm_h: list = field(default_factory=list)
    norm_zx: list | None = field(default_factory=list)
    norm_za: list | None = field(default_factory=list)
    predictions: dict[float, Tensor] = field(default_factory=dict)
    event_times: list[float] = field(default_factory=list)
    jumps: list[tuple[float, np.ndarray, np.ndarray]] = field(default_factory=list)

    def prediction_list(self) -> list[Tensor]:
        return [self.predictions[t] for t in sorted(self.predictions)]


def _norm(v: np.ndarray):
    n = np.linalg.norm(v, axis=-1)
    return float(n) if np.ndim(n) == 0 else n


def _check_on_grid(t: float, t0: float, horizon: float, dt: float) -> None:
    if t < t0 - GRID_TOL or t > horizon + GRID_TOL:
        raise ValueError(f"event/decode time {t} outside [{t0}, {horizon}]")
    grid_steps(t0, t, dt)


def _masked(new: Tensor, old: Tensor, mask) -> Tensor:
    if mask is None or bool(np.all(mask)):
        return new
    return ad.where(mask, new, old)


def _checkpoints(t0, horizon, dt, timeline, decode_times):
    """Sorted stop times: events, decode requests and the horizon."""
    for e in timeline:
        _check_on_grid(e.t, t0, horizon, dt)
    decode_times = sorted(decode_times or [])
    for t in decode_times:
        _check_on_grid(t, t0, horizon, dt)
    stops = {round(t / dt): t for t in [t0, horizon, *timeline.times(), *decode_times]}
    return [stops[k] for k in sorted(stops)], decode_times


def run_imode(
    spec: FlowSpec,
    decoder: Callable[[Tensor], Tensor],
    timeline: EventTimeline,
    init: HybridState,
    horizon: float,
    dt: float,
    decode_times: Sequence[float] | None = None,
    record: bool = True,
) -> tuple[HybridState, StateTrace]:
    """Execute the IMODE hybrid system from ``init.t`` to ``horizon``.

    Between events ``(h, z_x, z_a)`` is integrated as one stacked vector.  At
    an event ``z_x <- g_x(h, z_x, x)`` is applied first (if an observation is
    present), then ``z_a <- g_a(h, z_a, a)``; ``h`` is left untouched.  An
    event at ``init.t`` is applied before integration starts.
    """
    nh, nzx, nza = init.h.shape[-1], init.z_x.shape[-1], init.z_a.shape[-1]
    if init.h.shape[:-1] != init.z_x.shape[:-1] or init.h.shape[:-1] != init.z_a.shape[:-1]:
        raise ValueError("h, z_x and z_a disagree on batch shape")
    stops, decode_times = _checkpoints(init.t, horizon, dt, timeline, decode_times)
    events = {round(e.t / dt): e for e in timeline}
    decode_keys = {round(t / dt) for t in decode_times}
    trace = StateTrace(event_times=timeline.times())
    zero_x = ad.tensor(np.zeros(init.z_x.shape)) if spec.f_x is None else None
    zero_a = ad.tensor(np.zeros(init.z_a.shape)) if spec.f_a is None else None

    def field_fn(t, y):
        h = ad.take(y, 0, nh)
        zx = ad.take(y, nh, nh + nzx)
        za = ad.take(y, nh + nzx, nh + nzx + nza)
        dh = spec.f_h(h, zx, za)
        dzx = zero_x if spec.f_x is None else spec.f_x(zx)
        dza = zero_a if spec.f_a is None else spec.f_a(za)
        if dh.shape != h.shape or dzx.shape != zx.shape or dza.shape != za.shape:
            raise ValueError("flow output dimensions do not match state dimensions")
        return ad.concat((dh, dzx, dza))

    def record_point(t, y):
        if record:
            v = y.value
            trace.t.append(t)
            trace.norm_h.append(_norm(v[..., :nh]))
            trace.norm_zx.append(_norm(v[..., nh : nh + nzx]))
            trace.norm_za.append(_norm(v[..., nh + nzx :]))

    h, zx, za = init.h, init.z_x, init.z_a
    t = init.t
    for stop in stops:
        if stop > t:
            y = ad.concat((h, zx, za))
            n = grid_steps(t, stop, dt)
            for i in range(n):
                y = rk4_step(field_fn, y, t + i * dt, dt)
                if i < n - 1:
                    record_point(t + (i + 1) * dt, y)
            h, zx, za = ad.take(y, 0, nh), ad.take(y, nh, nh + nzx), ad.take(y, nh + nzx, nh + nzx + nza)
            t = stop
        key = round(stop / dt)
        event = events.get(key)
        if event is not None:
            h_before = h.value.copy()
            if event.has_x:
                x = ad.tensor(event.x)
                new = spec.g_x(h, zx, x)
                if new.shape != zx.shape:
                    raise ValueError("g_x output dimension does not match z_x")
                zx = _masked(new, zx, event.x_mask)
            if event.has_a:
                a = ad.tensor(event.a)
                new = spec.g_a(h, za, a)
                if new.shape != za.shape:
                    raise ValueError("g_a output dimension does not match z_a")
                za = _masked(new, za, event.a_mask)
            trace.jumps.append((stop, h_before, h.value.copy()))
        if record:
            trace.t.append(stop)
            trace.norm_h.append(_norm(h.value))
            trace.norm_zx.append(_norm(zx.value))
            trace.norm_za.append(_norm(za.value))
        if key in decode_keys:
            trace.predictions[stop] = decoder(h)
    return HybridState(h, zx, za, t), trace


def run_njde(
    flow: Callable[[float, Tensor], Tensor] | None,
    jump: Callable[[Tensor, Tensor], Tensor],
    timeline: EventTimeline,
    h0: Tensor,
    t0: float,
    horizon: float,
    dt: float,
    decoder: Callable[[Tensor], Tensor] | None = None,
    decode_times: Sequence[float] | None = None,
    record: bool = True,
) -> tuple[Tensor, StateTrace]:
    """Execute ``dh/dt = flow(t, h)`` with ``h <- jump(h, input)`` at events.

    The jump input is the concatenation of whichever of ``x``/``a`` the
    event carries; callers that want a fixed ``[x; a]`` layout fill both.
    The event's ``x_mask`` (or ``a_mask`` if ``x`` is absent) selects rows.
    A ``None`` flow means ``h`` is constant between events.
    """
    stops, decode_times = _checkpoints(t0, horizon, dt, timeline, decode_times)
    events = {round(e.t / dt): e for e in timeline}
    decode_keys = {round(t / dt) for t in decode_times}
    trace = StateTrace(norm_zx=None, norm_za=None, event_times=timeline.times())

    h = h0
    t = t0
    for stop in stops:
        if stop > t:
            if flow is None:
                grid_steps(t, stop, dt)
                if record:
                    n = grid_steps(t, stop, dt)
                    for i in range(1, n):
                        trace.t.append(t + i * dt)
                        trace.norm_h.append(_norm(h.value))
            else:
                n = grid_steps(t, stop, dt)
                for i in range(n):
                    h = rk4_step(flow, h, t + i * dt, dt)
                    if record and i < n - 1:
                        trace.t.append(t + (i + 1) * dt)
                        trace.norm_h.append(_norm(h.value))
            t = stop
        key = round(stop / dt)
        event = events.get(key)
        if event is not None:
            parts = [p for p in (event.x, event.a) if p is not None]
            u = ad.tensor(np.concatenate(parts, axis=-1))
            mask = event.x_mask if event.x is not None else event.a_mask
            h_before = h.value.copy()
            if mask is None or np.any(mask):
                h = _masked(jump(h, u), h, mask)
            trace.jumps.append((stop, h_before, h.value.copy()))
        if record:
            trace.t.append(stop)
            trace.norm_h.append(_norm(h.value))
        if key in decode_keys and decoder is not None:
            trace.predictions[stop] = decoder(h)
    return h, trace


# --------------------------------------------------------------------- CSV


def write_trace_csv(
    trace: StateTrace,
    path,
    truths: dict[float, np.ndarray] | None = None,
    dt: float = 0.01,
) -> None:
    """Write a single-episode trace: t, event flag, norms, decoded x-hat and true x.

    Columns for ``z_x``/``z_a`` norms are omitted for single-state traces.
    Cells are empty where a value is undefined at that grid time.
    """
    truths = truths or {}
    preds = {round(t / dt): p.value for t, p in trace.predictions.items()}
    trues = {round(t / dt): np.asarray(v) for t, v in truths.items()}
    n_x = 0
    for v in list(preds.values()) + list(trues.values()):
        n_x = max(n_x, np.asarray(v).shape[-1])
    has_z = trace.norm_zx is not None
    events = {round(t / dt) for t in trace.event_times}
    header = ["t", "event", "norm_h"] + (["norm_zx", "norm_za"] if has_z else [])
    header += [f"xhat_{i}" for i in range(n_x)] + [f"x_{i}" for i in range(n_x)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(trace.t):
            key = round(t / dt)
            row = [repr(float(t)), "1" if key in events else "0", _cell(trace.norm_h[i])]
            if has_z:
                row += [_cell(trace.norm_zx[i]), _cell(trace.norm_za[i])]
            p = preds.get(key)
            x = trues.get(key)
            row += [_cell(v) for v in np.ravel(p)] if p is not None else [""] * n_x
            row += [_cell(v) for v in np.ravel(x)] if x is not None else [""] * n_x
            w.writerow(row)


def _cell(v) -> str:
    return repr(float(np.ravel(v)[0]))


def read_trace_csv(path) -> dict[str, np.ndarray]:
    """Load a trace CSV into columns (empty cells become NaN)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[j]) if r[j] != "" else np.nan for r in body]) for j, name in enumerate(header)}
    return cols
