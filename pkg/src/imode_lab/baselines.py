"""Comparison models that see observations and interventions as one input.

Each time step feeds ``[x_k; a_k]`` (``a_k`` zero when absent) into a GRU.
GRU-dt appends the time gap as an extra input, GRU-Decay shrinks the hidden
state by ``exp(-w * dt)`` before the update, and ODE-RNN lets the hidden
state follow an MLP vector field between steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .episodes import Episode, EpisodeBatch, make_batch
from .hybrid_ode import Event, EventTimeline, StateTrace, run_njde
from .imode import reconstruction_loss
from .nn import HIDDEN, GruCell, Mlp, ParamSpec, gru_specs, gru_step, init_params, mlp_specs


class BaselineKind(str, Enum):
    GRU_DT = "gru_dt"
    GRU_DECAY = "gru_decay"
    ODE_RNN = "odernn"


@dataclass(frozen=True)
class BaselineDims:
    n_x: int
    n_a: int
    n_h: int = HIDDEN


@dataclass
class AlignedInput:
    t: float
    u: np.ndarray  # [x; a]
    dt: float


def align(episode: Episode, n_a: int) -> list[AlignedInput]:
    """One ``[x; a]`` vector per observation time, ``a`` zero-filled."""
    times = episode.times
    slots = {round(float(t) * 1e6): k for k, t in enumerate(times)}
    a = np.zeros((len(times), n_a))
    for t, vec in episode.interventions:
        k = slots.get(round(t * 1e6))
        if k is None:
            raise ValueError(f"intervention at t={t} has no observation slot")
        a[k] = vec
    gaps = _gaps(times)
    return [AlignedInput(float(t), np.concatenate([episode.x[k], a[k]]), gaps[k]) for k, t in enumerate(times)]


def _gaps(times: np.ndarray) -> np.ndarray:
    # the first step has no predecessor; use the first spacing
    gaps = np.diff(times, prepend=times[0])
    gaps[0] = times[1] - times[0] if len(times) > 1 else 1.0
    return gaps


class BaselineModel:
    family = "baseline"

    def __init__(self, kind: BaselineKind | str, dims: BaselineDims, params: ParamStore, hidden: int = HIDDEN):
        self.kind_enum = BaselineKind(kind)
        self.dims = dims
        self.params = params
        self.hidden = hidden
        self.cell = GruCell.from_store(params, "gru")
        self.flow = Mlp.from_store(params, "flow") if self.kind_enum is BaselineKind.ODE_RNN else None

    @property
    def kind(self) -> str:
        return self.kind_enum.value

    def decay_rate(self) -> Tensor:
        return ad.softplus(self.params["decay.raw"])

    def readout(self, h: Tensor) -> Tensor:
        return ad.linear(h, self.params["readout.W"], self.params["readout.b"])

    def initial_hidden(self, batch: int) -> Tensor:
        return ad.tensor(np.zeros((batch, self.dims.n_h)))

    def step(self, h: Tensor, u: np.ndarray, gap: float, decay: Tensor | None = None) -> Tensor:
        if self.kind_enum is BaselineKind.GRU_DT:
            return gru_deltat_step(self, h, u, gap)
        if self.kind_enum is BaselineKind.GRU_DECAY:
            return gru_decay_step(self, h, u, gap, decay)
        raise TypeError("ODE-RNN has no discrete-only step")

    # -- harness interface -------------------------------------------------

    def loss(self, batch: EpisodeBatch, k_obs: int, dt: float) -> Tensor:
        if self.kind_enum is BaselineKind.ODE_RNN:
            preds, _, targets = odernn_rollout(self, batch, k_obs, dt, record=False)
            return reconstruction_loss(preds, [batch.x[:, k] for k in targets])
        return rnn_one_step_loss(self, batch)

    def predict(self, batch: EpisodeBatch, k_obs: int, dt: float, record: bool = False):
        if self.kind_enum is BaselineKind.ODE_RNN:
            preds, trace, _ = odernn_rollout(self, batch, k_obs, dt, record=record)
        else:
            preds, trace = rnn_autoregressive(self, batch, k_obs)
        return [p.value for p in preds], trace if record else None

    def to_checkpoint(self) -> dict:
        return {
            "family": self.family,
            "kind": self.kind,
            "dims": asdict(self.dims),
            "hidden": self.hidden,
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> BaselineModel:
        return cls(payload["kind"], BaselineDims(**payload["dims"]), ParamStore.from_dict(payload["params"]), payload["hidden"])


def build_baseline(kind: BaselineKind | str, dims: BaselineDims, seed: int, hidden: int = HIDDEN) -> BaselineModel:
    kind = BaselineKind(kind)
    n_in = dims.n_x + dims.n_a + (1 if kind is BaselineKind.GRU_DT else 0)
    specs = gru_specs("gru", n_in, dims.n_h)
    specs += [ParamSpec("readout.W", (dims.n_x, dims.n_h)), ParamSpec("readout.b", (dims.n_x,))]
    if kind is BaselineKind.GRU_DECAY:
        specs.append(ParamSpec("decay.raw", (dims.n_h,)))
    if kind is BaselineKind.ODE_RNN:
        specs += mlp_specs("flow", dims.n_h, dims.n_h, hidden)
    return BaselineModel(kind, dims, init_params(specs, seed), hidden)


# -------------------------------------------------------------------- steps


def _gap_column(u: np.ndarray, gap: float) -> np.ndarray:
    return np.concatenate([u, np.full(u.shape[:-1] + (1,), float(gap))], axis=-1)


def gru_deltat_step(model: BaselineModel, h: Tensor, u, gap: float) -> Tensor:
    """GRU step on ``[u; dt]``."""
    u = u.value if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    return gru_step(model.cell, h, ad.tensor(_gap_column(u, gap)))


def gru_decay_step(model: BaselineModel, h: Tensor, u, gap: float, decay: Tensor | None = None) -> Tensor:
    """Shrink ``h`` by ``exp(-w * dt)``, then a GRU step on ``u``."""
    if gap <= 0:
        raise ValueError("time gap must be positive")
    w = model.decay_rate() if decay is None else decay
    h_decayed = ad.mul(h, ad.exp(ad.scale(w, -gap)))
    u = u if isinstance(u, Tensor) else ad.tensor(u)
    return gru_step(model.cell, h_decayed, u)


# ------------------------------------------------------------- RNN drivers


def _as_batch(model, episodes) -> EpisodeBatch:
    if isinstance(episodes, EpisodeBatch):
        return episodes
    if isinstance(episodes, Episode):
        episodes = [episodes]
    return make_batch(list(episodes), model.dims.n_a)


def rnn_one_step_loss(model: BaselineModel, episodes) -> Tensor:
    """Teacher-forced: after reading step k, predict the observation at k+1."""
    batch = _as_batch(model, episodes)
    u = np.concatenate([batch.x, batch.aligned_a()], axis=-1)
    gaps = _gaps(batch.times)
    decay = model.decay_rate() if model.kind_enum is BaselineKind.GRU_DECAY else None
    h = model.initial_hidden(batch.size)
    preds, truths = [], []
    for k in range(len(batch.times) - 1):
        h = model.step(h, u[:, k], gaps[k], decay)
        preds.append(model.readout(h))
        truths.append(batch.x[:, k + 1])
    return reconstruction_loss(preds, truths)


def rnn_autoregressive(model: BaselineModel, episodes, k_obs: int) -> tuple[list[Tensor], StateTrace]:
    """Read ``k_obs`` true steps, then feed back predictions with the true interventions."""
    batch = _as_batch(model, episodes)
    a = batch.aligned_a()
    gaps = _gaps(batch.times)
    decay = model.decay_rate() if model.kind_enum is BaselineKind.GRU_DECAY else None
    trace = StateTrace(norm_zx=None, norm_za=None, event_times=[float(t) for t in batch.a_times])
    h = model.initial_hidden(batch.size)
    preds = []
    x_in = None
    for k in range(len(batch.times)):
        if k < k_obs:
            u = np.concatenate([batch.x[:, k], a[:, k]], axis=-1)
            h = model.step(h, u, gaps[k], decay)
        else:
            pred = model.readout(h)
            preds.append(pred)
            trace.predictions[float(batch.times[k])] = pred
            x_in = pred.value if k + 1 < len(batch.times) else None
            if x_in is not None:
                h = model.step(h, np.concatenate([x_in, a[:, k]], axis=-1), gaps[k], decay)
        trace.t.append(float(batch.times[k]))
        trace.norm_h.append(np.linalg.norm(h.value, axis=-1))
    return preds, trace


def odernn_rollout(model: BaselineModel, episodes, k_obs: int, dt: float, record: bool = False):
    """Jumps at the ``k_obs`` prefix steps, then free flow with jumps only at
    intervention times (observation segment zero-filled).

    Returns ``(predictions, trace, target_indices)``.
    """
    batch = _as_batch(model, episodes)
    if not 1 <= k_obs <= len(batch.times):
        raise ValueError(f"need at least k_obs={k_obs} observations")
    a = batch.aligned_a()
    has_a = np.zeros(a.shape[:2], dtype=bool)
    index = {round(float(t) * 1e6): k for k, t in enumerate(batch.times)}
    for j, t in enumerate(batch.a_times):
        has_a[:, index[round(float(t) * 1e6)]] |= batch.a_mask[:, j]
    flow = lambda t, h: model.flow(h)  # noqa: E731
    jump = lambda h, u: gru_step(model.cell, h, u)  # noqa: E731
    t0, t_split, horizon = float(batch.times[0]), float(batch.times[k_obs - 1]), float(batch.times[-1])

    prefix = EventTimeline(Event(float(batch.times[k]), x=batch.x[:, k], a=a[:, k]) for k in range(k_obs))
    h = model.initial_hidden(batch.size)
    h, trace1 = run_njde(flow, jump, prefix, h, t0, t_split, dt, record=record)

    zeros = np.zeros((batch.size, batch.n_x))
    future = EventTimeline(
        Event(float(batch.times[k]), x=zeros, a=a[:, k], x_mask=has_a[:, k])
        for k in range(k_obs, len(batch.times))
        if has_a[:, k].any()
    )
    targets = list(range(k_obs, len(batch.times)))
    decode_times = [float(batch.times[k]) for k in targets]
    h, trace2 = run_njde(flow, jump, future, h, t_split, horizon, dt, model.readout, decode_times, record=record)
    trace = trace2
    if record:
        trace = StateTrace(
            t=trace1.t[:-1] + trace2.t,
            norm_h=trace1.norm_h[:-1] + trace2.norm_h,
            norm_zx=None,
            norm_za=None,
            predictions=trace2.predictions,
            event_times=trace1.event_times + trace2.event_times,
            jumps=trace1.jumps + trace2.jumps,
        )
    return trace2.prediction_list(), trace, targets
