"""IMODE variants (switching, decaying, general), prefix encoding, rollout and loss.

The model keeps two latents next to the continuous state ``h``: ``z_x``
absorbs observations and ``z_a`` absorbs interventions, each through its own
jump map.  ``h`` is driven by ``f_h(h, z_x, z_a)`` and never jumps, so an
intervention changes the *dynamics* of ``h`` rather than ``h`` itself.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .episodes import Episode, EpisodeBatch, make_batch
from .hybrid_ode import FlowSpec, HybridState, StateTrace, run_imode
from .nn import HIDDEN, Mlp, ParamSpec, init_params, mlp_specs

# parameter groups: f_h / embedding, z_x components, z_a components, decoder
PSI, THETA, PHI, OMEGA = "psi", "theta", "phi", "omega"


class ImodeVariant(str, Enum):
    SWITCH = "switch"
    DECAY = "decay"
    GENERAL = "general"


@dataclass(frozen=True)
class Dims:
    n_x: int
    n_a: int
    n_h: int
    n_zx: int
    n_za: int


def default_dims(variant: ImodeVariant | str, n_x: int, n_a: int, latent: int = HIDDEN) -> Dims:
    variant = ImodeVariant(variant)
    if variant is ImodeVariant.SWITCH:
        return Dims(n_x, n_a, n_x, n_x, n_x)
    if variant is ImodeVariant.DECAY:
        return Dims(n_x, n_a, n_x, latent, latent)
    return Dims(n_x, n_a, latent, latent, latent)


def _check_dims(variant: ImodeVariant, d: Dims) -> None:
    if min(asdict(d).values()) <= 0:
        raise ValueError(f"all dimensions must be positive: {d}")
    if variant is ImodeVariant.SWITCH and not d.n_h == d.n_zx == d.n_za:
        raise ValueError("switch variant needs n_h == n_zx == n_za (f_h = z_x + z_a)")
    if variant in (ImodeVariant.SWITCH, ImodeVariant.DECAY) and d.n_h != d.n_x:
        raise ValueError(f"{variant.value} variant decodes with the identity, so n_h must equal n_x")


def _variant_specs(variant: ImodeVariant, d: Dims, hidden: int) -> list[ParamSpec]:
    specs = mlp_specs("g_x", d.n_h + d.n_zx + d.n_x, d.n_zx, hidden, THETA)
    specs += mlp_specs("g_a", d.n_h + d.n_za + d.n_a, d.n_za, hidden, PHI)
    if variant is ImodeVariant.SWITCH:
        return specs
    specs += mlp_specs("f_h", d.n_h + d.n_zx + d.n_za, d.n_h, hidden, PSI)
    specs += mlp_specs("f_x", d.n_zx, d.n_zx, hidden, THETA)
    if variant is ImodeVariant.DECAY:
        specs.append(ParamSpec("log_alpha", (1,), PHI))
        return specs
    specs += mlp_specs("f_a", d.n_za, d.n_za, hidden, PHI)
    specs += mlp_specs("decoder", d.n_h, d.n_x, hidden, OMEGA)
    specs += [ParamSpec("embed.W", (d.n_h, d.n_x), PSI), ParamSpec("embed.b", (d.n_h,), PSI)]
    return specs


class ImodeModel:
    """A wired IMODE component set for one variant.

    ``alpha`` (decay variant) is stored as ``log_alpha`` so it stays positive;
    it starts at 1.0 because biases and vector parameters initialise to zero.
    """

    family = "imode"

    def __init__(self, variant: ImodeVariant | str, dims: Dims, params: ParamStore, hidden: int = HIDDEN):
        self.variant = ImodeVariant(variant)
        _check_dims(self.variant, dims)
        self.dims = dims
        self.params = params
        self.hidden = hidden
        mlp = lambda name: Mlp.from_store(params, name)  # noqa: E731
        self.g_x = mlp("g_x")
        self.g_a = mlp("g_a")
        self.f_h = self.f_x = self.f_a = self.decoder_mlp = None
        if self.variant is not ImodeVariant.SWITCH:
            self.f_h = mlp("f_h")
            self.f_x = mlp("f_x")
        if self.variant is ImodeVariant.GENERAL:
            self.f_a = mlp("f_a")
            self.decoder_mlp = mlp("decoder")

    @property
    def kind(self) -> str:
        return f"imode_{self.variant.value}"

    @property
    def alpha(self) -> float | None:
        if self.variant is not ImodeVariant.DECAY:
            return None
        return float(np.exp(self.params["log_alpha"].value[0]))

    # -- components ------------------------------------------------------

    def flow_spec(self) -> FlowSpec:
        """Fresh closures over the current parameter tensors."""
        g_x = lambda h, z, x: self.g_x(ad.concat((h, z, x)))  # noqa: E731
        g_a = lambda h, z, a: self.g_a(ad.concat((h, z, a)))  # noqa: E731
        if self.variant is ImodeVariant.SWITCH:
            return FlowSpec(f_h=lambda h, zx, za: zx + za, f_x=None, f_a=None, g_x=g_x, g_a=g_a)
        f_h = lambda h, zx, za: self.f_h(ad.concat((h, zx, za)))  # noqa: E731
        if self.variant is ImodeVariant.DECAY:
            alpha = ad.exp(self.params["log_alpha"])
            f_a = lambda za: ad.neg(ad.mul(za, alpha))  # noqa: E731
        else:
            f_a = self.f_a
        return FlowSpec(f_h=f_h, f_x=self.f_x, f_a=f_a, g_x=g_x, g_a=g_a)

    def decode(self, h: Tensor) -> Tensor:
        if self.decoder_mlp is None:
            return h
        return self.decoder_mlp(h)

    def initial_state(self, x0: np.ndarray, t0: float) -> HybridState:
        """``h`` embeds the first observation; both latents start at zero."""
        x0 = np.asarray(x0, dtype=np.float64)
        batch = x0.shape[:-1]
        if self.variant is ImodeVariant.GENERAL:
            h = ad.linear(ad.tensor(x0), self.params["embed.W"], self.params["embed.b"])
        else:
            h = ad.tensor(x0)
        zx = ad.tensor(np.zeros(batch + (self.dims.n_zx,)))
        za = ad.tensor(np.zeros(batch + (self.dims.n_za,)))
        return HybridState(h, zx, za, float(t0))

    # -- harness interface -------------------------------------------------

    def loss(self, batch: EpisodeBatch, k_obs: int, dt: float) -> Tensor:
        state = encode_prefix(self, batch, k_obs, dt)
        return rollout(self, state, batch, dt=dt).loss

    def predict(self, batch: EpisodeBatch, k_obs: int, dt: float, record: bool = False):
        state, prefix_trace = encode_prefix_traced(self, batch, k_obs, dt, record=record)
        result = rollout(self, state, batch, dt=dt, record=record)
        trace = merge_traces(prefix_trace, result.trace) if record else None
        return [p.value for p in result.predictions], trace

    def to_checkpoint(self) -> dict:
        return {
            "family": self.family,
            "kind": self.kind,
            "variant": self.variant.value,
            "dims": asdict(self.dims),
            "hidden": self.hidden,
            "alpha": self.alpha,
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> ImodeModel:
        return cls(
            payload["variant"], Dims(**payload["dims"]), ParamStore.from_dict(payload["params"]), payload["hidden"]
        )


def build_variant(variant: ImodeVariant | str, dims: Dims, seed: int, hidden: int = HIDDEN) -> ImodeModel:
    variant = ImodeVariant(variant)
    _check_dims(variant, dims)
    params = init_params(_variant_specs(variant, dims, hidden), seed)
    return ImodeModel(variant, dims, params, hidden)


# ---------------------------------------------------------------- execution


def as_batch(episodes, n_a: int) -> EpisodeBatch:
    if isinstance(episodes, EpisodeBatch):
        return episodes
    if isinstance(episodes, Episode):
        episodes = [episodes]
    return make_batch(list(episodes), n_a)


def encode_prefix_traced(
    m: ImodeModel, episodes, k_obs: int, dt: float, record: bool = True
) -> tuple[HybridState, StateTrace]:
    batch = as_batch(episodes, m.dims.n_a)
    if not 1 <= k_obs <= len(batch.times):
        raise ValueError(f"need at least k_obs={k_obs} observations, episode has {len(batch.times)}")
    if batch.n_x != m.dims.n_x:
        raise ValueError(f"model expects n_x={m.dims.n_x}, data has {batch.n_x}")
    t0, t_end = float(batch.times[0]), float(batch.times[k_obs - 1])
    init = m.initial_state(batch.x[:, 0], t0)
    timeline = batch.timeline(t0, t_end, with_obs=True)
    return run_imode(m.flow_spec(), m.decode, timeline, init, t_end, dt, record=record)


def encode_prefix(m: ImodeModel, episodes, k_obs: int, dt: float = 0.01) -> HybridState:
    """Teacher-force the first ``k_obs`` observations (and any interventions
    up to the last of them); returns the state right after that observation."""
    state, _ = encode_prefix_traced(m, episodes, k_obs, dt, record=False)
    return state


@dataclass
class RolloutResult:
    times: list[float]
    predictions: list[Tensor]
    trace: StateTrace
    loss: Tensor | None


def rollout(
    m: ImodeModel,
    state: HybridState,
    episodes,
    horizon: float | None = None,
    dt: float = 0.01,
    record: bool = False,
) -> RolloutResult:
    """Free-run from ``state`` applying only the true interventions.

    Decodes at every observation time in ``(state.t, horizon]`` and scores
    those predictions with :func:`reconstruction_loss`.
    """
    batch = as_batch(episodes, m.dims.n_a)
    horizon = float(batch.times[-1]) if horizon is None else float(horizon)
    targets = [k for k, t in enumerate(batch.times) if state.t + 1e-9 < t <= horizon + 1e-9]
    target_times = [float(batch.times[k]) for k in targets]
    timeline = batch.timeline(state.t, horizon, with_obs=False, include_lo=False)
    _, trace = run_imode(m.flow_spec(), m.decode, timeline, state, horizon, dt, target_times, record=record)
    preds = trace.prediction_list()
    loss = reconstruction_loss(preds, [batch.x[:, k] for k in targets]) if preds else None
    return RolloutResult(target_times, preds, trace, loss)


def reconstruction_loss(predictions: Sequence[Tensor], truths: Sequence[np.ndarray]) -> Tensor:
    """Mean over target times of the squared L2 error (also averaged over a batch)."""
    if len(predictions) != len(truths) or not predictions:
        raise ValueError(f"need equal, non-zero counts: {len(predictions)} predictions, {len(truths)} truths")
    total = None
    for pred, truth in zip(predictions, truths):
        truth = np.asarray(truth, dtype=np.float64)
        if truth.shape != pred.shape:
            raise ValueError(f"prediction {pred.shape} vs truth {truth.shape}")
        term = ad.sum_squares(ad.sub(pred, ad.tensor(truth)))
        total = term if total is None else ad.add(total, term)
    batch = int(np.prod(predictions[0].shape[:-1]))
    return ad.scale(total, 1.0 / (len(predictions) * batch))


def merge_traces(first: StateTrace, second: StateTrace) -> StateTrace:
    """Concatenate two consecutive traces, dropping the shared boundary point of ``first``."""
    keep = len(first.t)
    if second.t and first.t and abs(second.t[0] - first.t[-1]) < 1e-9:
        keep -= 1
    out = StateTrace(
        t=first.t[:keep] + second.t,
        norm_h=first.norm_h[:keep] + second.norm_h,
        norm_zx=None if first.norm_zx is None else first.norm_zx[:keep] + second.norm_zx,
        norm_za=None if first.norm_za is None else first.norm_za[:keep] + second.norm_za,
        predictions={**first.predictions, **second.predictions},
        event_times=first.event_times + second.event_times,
        jumps=first.jumps + second.jumps,
    )
    return out
