"""Episodes (one trajectory with sparse interventions), batching and JSON-lines IO."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hybrid_ode import GRID_TOL, Event, EventTimeline


@dataclass
class Episode:
    times: np.ndarray
    x: np.ndarray
    interventions: list[tuple[float, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] != self.times.shape[0]:
            raise ValueError(f"x has shape {self.x.shape} for {self.times.shape[0]} times")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("episode times must strictly increase")
        self.interventions = sorted(
            ((float(t), np.asarray(a, dtype=np.float64)) for t, a in self.interventions), key=lambda p: p[0]
        )

    @property
    def n_x(self) -> int:
        return self.x.shape[1]

    @property
    def n_a(self) -> int | None:
        return self.interventions[0][1].shape[0] if self.interventions else None

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        if not (np.array_equal(self.times, other.times) and np.array_equal(self.x, other.x)):
            return False
        if len(self.interventions) != len(other.interventions):
            return False
        return all(t1 == t2 and np.array_equal(a1, a2) for (t1, a1), (t2, a2) in zip(self.interventions, other.interventions))

    def intervention_at(self, t: float) -> np.ndarray | None:
        for s, a in self.interventions:
            if abs(s - t) <= GRID_TOL:
                return a
        return None

    def to_json(self) -> dict:
        return {
            "times": self.times.tolist(),
            "x": self.x.tolist(),
            "interventions": [{"t": _num(t), "a": a.tolist()} for t, a in self.interventions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> Episode:
        try:
            return cls(
                times=obj["times"],
                x=obj["x"],
                interventions=[(item["t"], item["a"]) for item in obj["interventions"]],
            )
        except (KeyError, TypeError) as err:
            raise ValueError(f"malformed episode record: {err}") from err


def _num(t: float):
    return int(t) if float(t).is_integer() else float(t)


def write_episodes(path, episodes: Iterable[Episode]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json()) + "\n")


def read_episodes(path) -> list[Episode]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Episode.from_json(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: {err}") from err
    return out


@dataclass
class DatasetSplit:
    train: list[Episode]
    val: list[Episode]
    test: list[Episode]

    def write(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in ("train", "val", "test"):
            paths[name] = directory / f"{name}.jsonl"
            write_episodes(paths[name], getattr(self, name))
        return paths

    @classmethod
    def read(cls, directory) -> DatasetSplit:
        directory = Path(directory)
        return cls(*(read_episodes(directory / f"{name}.jsonl") for name in ("train", "val", "test")))


# ------------------------------------------------------------------ batching


@dataclass
class EpisodeBatch:
    """Episodes sharing observation times, stacked along a leading axis.

    ``a`` is zero where ``a_mask`` is False.  ``a_times`` lists every time
    at which at least one episode has an intervention.
    """

    times: np.ndarray
    x: np.ndarray  # (B, K, n_x)
    a_times: np.ndarray
    a: np.ndarray  # (B, len(a_times), n_a)
    a_mask: np.ndarray  # (B, len(a_times))

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n_x(self) -> int:
        return self.x.shape[2]

    @property
    def n_a(self) -> int:
        return self.a.shape[2]

    def timeline(self, t_lo: float, t_hi: float, with_obs: bool, include_lo: bool = True) -> EventTimeline:
        """Events in ``[t_lo, t_hi]`` (or ``(t_lo, t_hi]``); observations only if ``with_obs``."""

        def inside(t):
            lo_ok = t >= t_lo - GRID_TOL if include_lo else t > t_lo + GRID_TOL
            return lo_ok and t <= t_hi + GRID_TOL

        slots: dict[int, dict] = {}
        if with_obs:
            for k, t in enumerate(self.times):
                if inside(t):
                    slots.setdefault(_key(t), {"t": float(t)})["x"] = self.x[:, k]
        for j, t in enumerate(self.a_times):
            if inside(t):
                slot = slots.setdefault(_key(t), {"t": float(t)})
                slot["a"] = self.a[:, j]
                slot["a_mask"] = self.a_mask[:, j]
        return EventTimeline(Event(**slots[k]) for k in sorted(slots))

    def aligned_a(self) -> np.ndarray:
        """Interventions on the observation grid, ``(B, K, n_a)``, zero-filled."""
        out = np.zeros((self.size, len(self.times), self.n_a))
        index = {_key(t): k for k, t in enumerate(self.times)}
        for j, t in enumerate(self.a_times):
            k = index.get(_key(t))
            if k is None:
                raise ValueError(f"intervention at t={t} has no observation slot")
            out[:, k] = np.where(self.a_mask[:, j, None], self.a[:, j], 0.0)
        return out


def _key(t: float) -> int:
    return round(float(t) * 1e6)


def make_batch(episodes: Sequence[Episode], n_a: int) -> EpisodeBatch:
    if not episodes:
        raise ValueError("empty batch")
    times = episodes[0].times
    for ep in episodes[1:]:
        if ep.times.shape != times.shape or not np.allclose(ep.times, times, rtol=0, atol=GRID_TOL):
            raise ValueError("episodes in a batch must share observation times")
    first = {}
    for ep in episodes:
        for t, _ in ep.interventions:
            first.setdefault(_key(t), t)
    keys = sorted(first)
    a_times = np.array([first[k] for k in keys], dtype=np.float64)
    col = {k: j for j, k in enumerate(keys)}
    a = np.zeros((len(episodes), len(keys), n_a))
    mask = np.zeros((len(episodes), len(keys)), dtype=bool)
    for b, ep in enumerate(episodes):
        for t, vec in ep.interventions:
            if vec.shape != (n_a,):
                raise ValueError(f"intervention width {vec.shape[0]} != {n_a}")
            j = col[_key(t)]
            a[b, j] = vec
            mask[b, j] = True
    return EpisodeBatch(times=times.copy(), x=np.stack([ep.x for ep in episodes]), a_times=a_times, a=a, a_mask=mask)
