"""Ground-truth generators: Moving Ball collisions and Exponential Decay.

Both produce :class:`~imode_lab.episodes.Episode` objects on a unit time
grid.  The step-wise simulator classes let counterfactual pairs share a
prefix and then branch on a single intervention.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .episodes import DatasetSplit, Episode

MOVING_BALL = "moving-ball"
EXP_DECAY = "exp-decay"
KINDS = (MOVING_BALL, EXP_DECAY)


# ------------------------------------------------------------ moving ball


def elastic_collision(p1, v1, p2, v2) -> tuple[np.ndarray, np.ndarray]:
    """Equal-mass elastic collision of two discs in contact.

    The velocity components along the line of centres are exchanged; the
    tangential components are untouched.
    """
    p1, v1, p2, v2 = (np.asarray(u, dtype=np.float64) for u in (p1, v1, p2, v2))
    d = p2 - p1
    dist = np.hypot(d[0], d[1])
    if dist == 0.0:
        raise ValueError("coincident centres: collision normal undefined")
    n = d / dist
    exchange = np.dot(v1 - v2, n)
    return v1 - exchange * n, v2 + exchange * n


@dataclass
class MovingBallConfig:
    length: int = 50
    radius: float = 0.05
    min_collisions: int = 1
    max_collisions: int = 3
    position_range: tuple[float, float] = (0.0, 1.0)
    speed_range: tuple[float, float] = (0.05, 0.2)
    closing_speed_range: tuple[float, float] = (0.05, 0.2)
    tangential_speed: float = 0.05

    def __post_init__(self):
        if not 0 <= self.min_collisions <= self.max_collisions < self.length:
            raise ValueError("invalid collision count range")


class MovingBallSim:
    """Target ball on an unbounded frictionless plane, hit by spawned balls."""

    def __init__(self, config: MovingBallConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        lo, hi = config.position_range
        self.p = rng.uniform(lo, hi, size=2)
        smin, smax = config.speed_range
        self.v = rng.uniform(smin, smax, size=2) * rng.choice([-1.0, 1.0], size=2)
        self.k = 0
        self.xs = [self.p.copy()]
        self.interventions: list[tuple[float, np.ndarray]] = []

    def random_ball(self) -> tuple[np.ndarray, np.ndarray]:
        """An intervening ball touching the target and closing in on it."""
        c = self.config
        angle = self.rng.uniform(0.0, 2.0 * np.pi)
        normal = np.array([np.cos(angle), np.sin(angle)])
        tangent = np.array([-normal[1], normal[0]])
        closing = self.rng.uniform(*c.closing_speed_range)
        slide = self.rng.uniform(-c.tangential_speed, c.tangential_speed)
        p_ball = self.p + 2.0 * c.radius * normal
        v_ball = self.v - closing * normal + slide * tangent
        return p_ball, v_ball

    def step(self, ball: str | tuple[np.ndarray, np.ndarray] | None = None) -> None:
        """Advance one time unit; optionally resolve a collision at the new time.

        ``ball`` is ``None``, ``"random"`` (spawn one via :meth:`random_ball`)
        or an explicit ``(position, velocity)`` touching the target.
        """
        self.k += 1
        self.p = self.p + self.v
        if isinstance(ball, str):
            if ball != "random":
                raise ValueError(f"unknown collision mode {ball!r}")
            ball = self.random_ball()
        if ball is not None:
            p_ball, v_ball = (np.asarray(u, dtype=np.float64) for u in ball)
            if not np.isclose(np.linalg.norm(p_ball - self.p), 2.0 * self.config.radius, rtol=1e-9):
                raise ValueError("intervening ball is not in contact with the target")
            self.v, _ = elastic_collision(self.p, self.v, p_ball, v_ball)
            self.interventions.append((float(self.k), np.concatenate([p_ball, v_ball])))
        self.xs.append(self.p.copy())

    def episode(self) -> Episode:
        return Episode(np.arange(len(self.xs), dtype=np.float64), np.array(self.xs), list(self.interventions))


def simulate_moving_ball(config: MovingBallConfig | None = None, seed: int = 0) -> Episode:
    config = config or MovingBallConfig()
    rng = np.random.default_rng(seed)
    sim = MovingBallSim(config, rng)
    n = rng.integers(config.min_collisions, config.max_collisions + 1)
    hits = set(rng.choice(np.arange(1, config.length), size=n, replace=False).tolist())
    for k in range(1, config.length):
        sim.step("random" if k in hits else None)
    return sim.episode()


# ------------------------------------------------------- exponential decay


@dataclass
class ExpDecayConfig:
    dt: float = 0.1
    length: int = 50
    velocity_matrix: list[list[float]] = field(default_factory=lambda: [[1.5, 0.0], [0.0, -2.5]])
    intervention_prob: float = 0.1
    effect_decay: float = 0.5
    effect_hidden: int = 40
    effect_seed: int = 1234
    literal_velocity_update: bool = False
    # explicit effect-MLP weights {W1, b1, W2, b2}; drawn from effect_seed when None
    effect_params: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.intervention_prob <= 1.0:
            raise ValueError("intervention probability must lie in [0, 1]")
        if not 0.0 < self.effect_decay < 1.0:
            raise ValueError("effect decay factor must lie in (0, 1)")
        if np.asarray(self.velocity_matrix).shape != (2, 2):
            raise ValueError("velocity matrix must be 2x2")

    def effect_weights(self) -> dict[str, np.ndarray]:
        if self.effect_params is not None:
            return {k: np.asarray(v, dtype=np.float64) for k, v in self.effect_params.items()}
        rng = np.random.default_rng(self.effect_seed)
        h = self.effect_hidden
        b1, b2 = 1.0 / np.sqrt(6), 1.0 / np.sqrt(h)
        return {
            "W1": rng.uniform(-b1, b1, size=(h, 6)),
            "b1": rng.uniform(-b1, b1, size=h),
            "W2": rng.uniform(-b2, b2, size=(2, h)),
            "b2": rng.uniform(-b2, b2, size=2),
        }

    def velocity_step_matrix(self) -> np.ndarray:
        """Per-step linear map applied to dx/dt."""
        m = np.asarray(self.velocity_matrix, dtype=np.float64)
        if self.literal_velocity_update:
            return m
        return np.eye(2) + self.dt * (m - np.eye(2))


def effect_mlp(weights: dict[str, np.ndarray], inp: np.ndarray) -> np.ndarray:
    hidden = np.maximum(weights["W1"] @ inp + weights["b1"], 0.0)
    return weights["W2"] @ hidden + weights["b2"]


class ExpDecaySim:
    """Position driven by a linear velocity recursion plus a halving hidden effect."""

    def __init__(self, config: ExpDecayConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.weights = config.effect_weights()
        self.step_matrix = config.velocity_step_matrix()
        self.x = rng.uniform(0.0, 1.0, size=2)
        self.v = rng.uniform(0.0, 1.0, size=2)
        self.e = np.zeros(2)
        self.k = 0
        self.xs = [self.x.copy()]
        self.vs = [self.v.copy()]
        self.es = [self.e.copy()]
        self.interventions: list[tuple[float, np.ndarray]] = []

    def step(self, intervention: str | np.ndarray | None = "random") -> None:
        """One generator iteration.

        ``intervention`` is ``"random"`` (Bernoulli draw), ``None`` (none)
        or an explicit 2-vector applied at this step.
        """
        c = self.config
        self.k += 1
        self.x = self.x + c.dt * (self.v + self.e)
        self.v = self.step_matrix @ self.v
        self.e = self.e * c.effect_decay
        a = None
        if isinstance(intervention, str):
            if intervention != "random":
                raise ValueError(f"unknown intervention mode {intervention!r}")
            if self.rng.random() < c.intervention_prob:
                a = self.rng.standard_normal(2)
        elif intervention is not None:
            a = np.asarray(intervention, dtype=np.float64)
        if a is not None:
            self.e = self.e + effect_mlp(self.weights, np.concatenate([self.x, self.v, a]))
            self.interventions.append((float(self.k), a))
        self.xs.append(self.x.copy())
        self.vs.append(self.v.copy())
        self.es.append(self.e.copy())

    def episode(self) -> Episode:
        return Episode(np.arange(len(self.xs), dtype=np.float64), np.array(self.xs), list(self.interventions))


def simulate_exponential_decay(
    config: ExpDecayConfig | None = None, seed: int = 0, return_hidden: bool = False
):
    """One episode; with ``return_hidden`` also the velocity and effect series."""
    config = config or ExpDecayConfig()
    sim = ExpDecaySim(config, np.random.default_rng(seed))
    for _ in range(1, config.length):
        sim.step()
    if return_hidden:
        return sim.episode(), {"v": np.array(sim.vs), "e": np.array(sim.es)}
    return sim.episode()


# --------------------------------------------------------- counterfactuals


@dataclass
class CounterfactualPair:
    prefix_len: int
    branch_a: Episode  # with the intervention right after the split
    branch_b: Episode  # without

    def to_json(self) -> dict:
        return {"prefix_len": self.prefix_len, "branch_a": self.branch_a.to_json(), "branch_b": self.branch_b.to_json()}

    @classmethod
    def from_json(cls, obj: dict) -> CounterfactualPair:
        try:
            return cls(obj["prefix_len"], Episode.from_json(obj["branch_a"]), Episode.from_json(obj["branch_b"]))
        except (KeyError, TypeError) as err:
            raise ValueError(f"malformed counterfactual record: {err}") from err


def make_counterfactual_pair(
    kind: str, seed: int, config=None, prefix_len: int = 10, branch_len: int = 10
) -> CounterfactualPair:
    """Shared ``prefix_len`` observations, then two ``branch_len``-step futures.

    Branch A receives one intervention at the first post-split time, branch
    B none; random interventions are suppressed after the split.
    """
    rng = np.random.default_rng(seed)
    if kind == MOVING_BALL:
        config = config or MovingBallConfig()
        sim = MovingBallSim(config, rng)
        hit = rng.integers(1, prefix_len) if prefix_len > 1 and rng.random() < 0.5 else None
        for k in range(1, prefix_len):
            sim.step("random" if k == hit else None)
        a_sim, b_sim = sim, copy.deepcopy(sim)
        a_sim.step("random")
        b_sim.step(None)
        for _ in range(branch_len - 1):
            a_sim.step(None)
            b_sim.step(None)
    elif kind == EXP_DECAY:
        config = config or ExpDecayConfig()
        sim = ExpDecaySim(config, rng)
        for _ in range(1, prefix_len):
            sim.step("random")
        a_sim, b_sim = sim, copy.deepcopy(sim)
        a_sim.step(a_sim.rng.standard_normal(2))
        b_sim.step(None)
        for _ in range(branch_len - 1):
            a_sim.step(None)
            b_sim.step(None)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    return CounterfactualPair(prefix_len, a_sim.episode(), b_sim.episode())


def write_pairs(path, pairs) -> None:
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json()) + "\n")


def read_pairs(path) -> list[CounterfactualPair]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(CounterfactualPair.from_json(json.loads(line)))
                except (json.JSONDecodeError, ValueError) as err:
                    raise ValueError(f"{path}:{lineno}: {err}") from err
    return out


# ---------------------------------------------------------------- datasets


def default_config(kind: str):
    if kind == MOVING_BALL:
        return MovingBallConfig()
    if kind == EXP_DECAY:
        return ExpDecayConfig()
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def config_from_dict(kind: str, payload: dict):
    cls = type(default_config(kind))
    return cls(**payload)


def simulate(kind: str, config, seed: int) -> Episode:
    if kind == MOVING_BALL:
        return simulate_moving_ball(config, seed)
    if kind == EXP_DECAY:
        return simulate_exponential_decay(config, seed)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def episode_seeds(seed: int, n: int) -> list[int]:
    """Distinct per-episode seeds derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def generate_dataset(
    kind: str, n_train: int = 1000, n_val: int = 100, n_test: int = 100, seed: int = 0, config=None
) -> DatasetSplit:
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("split sizes must be positive")
    config = config or default_config(kind)
    seeds = episode_seeds(seed, n_train + n_val + n_test)
    episodes = [simulate(kind, config, s) for s in seeds]
    return DatasetSplit(episodes[:n_train], episodes[n_train : n_train + n_val], episodes[n_train + n_val :])


def generate_pairs(kind: str, n: int, seed: int, config=None) -> list[CounterfactualPair]:
    return [make_counterfactual_pair(kind, s, config) for s in episode_seeds(seed, n)]


def config_to_json(config) -> str:
    return json.dumps(asdict(config))


def write_dataset(split: DatasetSplit, directory) -> dict[str, Path]:
    return split.write(directory)


def read_dataset(directory) -> DatasetSplit:
    return DatasetSplit.read(directory)
