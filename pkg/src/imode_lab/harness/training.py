"""Training protocol, evaluation and repeated-run statistics.

Protocol: teacher-force the first ``k_obs`` observations, free-run over the
remaining ``horizon`` steps with the true interventions, score with the
reconstruction loss.  Each repetition ("fold") reshuffles the fixed training
split with its own seed and keeps the parameters with the best validation
MSE seen after any epoch (epoch 0 is the untrained model).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..baselines import BaselineDims, BaselineKind, BaselineModel, build_baseline
from ..episodes import DatasetSplit, Episode, make_batch
from ..hybrid_ode import write_trace_csv
from ..imode import ImodeModel, ImodeVariant, build_variant, default_dims
from ..nn import RmspropState, clip_grad_norm, rmsprop_step
from ..simulators import CounterfactualPair, generate_dataset, config_from_dict

log = logging.getLogger(__name__)

MODEL_KINDS = tuple(f"imode_{v.value}" for v in ImodeVariant) + tuple(k.value for k in BaselineKind)


class TrainingError(RuntimeError):
    """A fold could not be completed (e.g. the loss became NaN)."""


@dataclass
class RunConfig:
    model: str = "imode_general"
    dataset: str | None = None
    generator: dict | None = None
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    dt: float = 0.5
    k_obs: int = 10
    horizon: int = 40
    folds: int = 5
    seed: int = 0
    hidden: int = 40
    latent: int = 40
    clip: float = 5.0
    workers: int = 1

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_KINDS}")
        for name in ("epochs", "folds", "k_obs", "hidden", "latent", "workers"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive")
        if self.batch_size <= 0 or self.lr <= 0 or self.dt <= 0 or self.horizon <= 0:
            raise ValueError("batch_size, lr, dt and horizon must be positive")

    @classmethod
    def from_dict(cls, payload: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


FULL_SCALE = {"dt": 0.01, "batch_size": 32, "lr": 1e-3, "folds": 5}
FULL_EPOCHS = {"moving-ball": 1000, "exp-decay": 1500}
DESK_COUNTS = {"n_train": 300, "n_val": 100, "n_test": 100}
FULL_COUNTS = {"n_train": 1000, "n_val": 100, "n_test": 100}


def full_scale(kind: str | None) -> dict:
    """Overrides for the full-size protocol; epochs depend on the dataset."""
    return {**FULL_SCALE, "epochs": FULL_EPOCHS.get(kind, 1000)}


@dataclass
class Metrics:
    """Per-fold MSEs with their mean and population standard deviation (ddof=0)."""

    val_mse: list[float]
    test_mse: list[float]
    cf_mse: list[float] | None = None

    @staticmethod
    def _agg(values):
        return {"mean": float(np.mean(values)), "std": float(np.std(values))}

    def to_dict(self) -> dict:
        out = {
            "folds": len(self.test_mse),
            "std_kind": "population (ddof=0) over folds",
            "val_mse": {"per_fold": self.val_mse, **self._agg(self.val_mse)},
            "test_mse": {"per_fold": self.test_mse, **self._agg(self.test_mse)},
        }
        if self.cf_mse is not None:
            out["cf_mse"] = {"per_fold": self.cf_mse, **self._agg(self.cf_mse)}
        return out


# ------------------------------------------------------------------ models


def build_model(kind: str, n_x: int, n_a: int, seed: int, hidden: int = 40, latent: int = 40):
    if kind.startswith("imode_"):
        variant = kind.removeprefix("imode_")
        return build_variant(variant, default_dims(variant, n_x, n_a, latent), seed, hidden)
    return build_baseline(kind, BaselineDims(n_x, n_a, latent), seed, hidden)


def load_checkpoint(payload: dict):
    family = payload.get("family")
    if family == "imode":
        return ImodeModel.from_checkpoint(payload)
    if family == "baseline":
        return BaselineModel.from_checkpoint(payload)
    raise ValueError(f"unknown checkpoint family {family!r}")


def save_checkpoint(model, path, protocol: dict | None = None) -> None:
    payload = model.to_checkpoint()
    if protocol:
        payload["protocol"] = protocol
    Path(path).write_text(json.dumps(payload))


def read_checkpoint(path):
    payload = json.loads(Path(path).read_text())
    return load_checkpoint(payload), payload.get("protocol", {})


def infer_n_a(episodes) -> int:
    for ep in episodes:
        if ep.n_a is not None:
            return ep.n_a
    raise ValueError("cannot infer intervention width: no episode has an intervention")


# ------------------------------------------------------------- evaluation


def _batches(episodes: list[Episode], indices, batch_size: int):
    """Consecutive chunks of ``indices``, grouped so each batch shares its time grid."""
    groups = defaultdict(list)
    for i in indices:
        groups[episodes[i].times.tobytes()].append(i)
    for members in groups.values():
        for start in range(0, len(members), batch_size):
            yield [episodes[i] for i in members[start : start + batch_size]]


def per_episode_mse(model, episodes: list[Episode], k_obs: int, dt: float, batch_size: int = 100) -> np.ndarray:
    """Reconstruction loss of each episode under the rollout protocol."""
    out = np.empty(len(episodes))
    order = {id(ep): i for i, ep in enumerate(episodes)}
    for chunk in _batches(episodes, range(len(episodes)), batch_size):
        batch = make_batch(chunk, model.dims.n_a)
        preds, _ = model.predict(batch, k_obs, dt)
        truth = batch.x[:, k_obs:]
        err = np.stack(preds, axis=1) - truth
        per = np.mean(np.sum(err * err, axis=-1), axis=1)
        for ep, v in zip(chunk, per):
            out[order[id(ep)]] = v
    return out


def evaluate(model, episodes: list[Episode], k_obs: int, dt: float) -> float:
    return float(np.mean(per_episode_mse(model, episodes, k_obs, dt)))


def per_pair_cf_mse(model, pairs: list[CounterfactualPair], dt: float) -> np.ndarray:
    """Mean of the two branch losses; the shared prefix is conditioning only."""
    if not pairs:
        raise ValueError("no counterfactual pairs")
    k_obs = pairs[0].prefix_len
    a = per_episode_mse(model, [p.branch_a for p in pairs], k_obs, dt)
    b = per_episode_mse(model, [p.branch_b for p in pairs], k_obs, dt)
    return 0.5 * (a + b)


def evaluate_counterfactual(model, pairs: list[CounterfactualPair], dt: float) -> float:
    return float(np.mean(per_pair_cf_mse(model, pairs, dt)))


# ---------------------------------------------------------------- training


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    val_mse: float
    test_mse: float
    checkpoint: dict
    history: list[dict] = field(default_factory=list)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def check_protocol(config: RunConfig, split: DatasetSplit) -> None:
    for name in ("train", "val", "test"):
        for ep in getattr(split, name):
            if len(ep) != config.k_obs + config.horizon:
                raise ValueError(
                    f"{name} episode has {len(ep)} steps; k_obs + horizon = {config.k_obs + config.horizon}"
                )


def train_fold(config: RunConfig, split: DatasetSplit, fold: int, n_a: int | None = None) -> FoldResult:
    seed = fold_seed(config.seed, fold)
    rng = np.random.default_rng(seed)
    n_x = split.train[0].n_x
    n_a = n_a or infer_n_a(split.train)
    model = build_model(config.model, n_x, n_a, seed, config.hidden, config.latent)
    opt = RmspropState(lr=config.lr)

    best_val = evaluate(model, split.val, config.k_obs, config.dt)
    best_epoch, best_values = 0, model.params.get_values()
    history = [{"fold": fold, "epoch": 0, "train_loss": float("nan"), "val_mse": best_val}]
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(split.train))
        losses = []
        for chunk in _batches(split.train, order, config.batch_size):
            batch = make_batch(chunk, n_a)
            try:
                loss = model.loss(batch, config.k_obs, config.dt)
            except FloatingPointError as err:
                raise TrainingError(f"fold {fold} epoch {epoch}: {err}") from err
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"fold {fold} epoch {epoch}: loss became {value}")
            grads = ad.backward(loss, model.params)
            clip_grad_norm(grads, config.clip)
            rmsprop_step(opt, model.params, grads)
            losses.append(value * len(chunk))
        train_loss = sum(losses) / len(split.train)
        val = evaluate(model, split.val, config.k_obs, config.dt)
        if not np.isfinite(val):
            raise TrainingError(f"fold {fold} epoch {epoch}: validation MSE became {val}")
        if val < best_val:
            best_val, best_epoch, best_values = val, epoch, model.params.get_values()
        history.append({"fold": fold, "epoch": epoch, "train_loss": train_loss, "val_mse": val})
        log.info(
            "%s fold %d epoch %d train %.6g val %.6g (%.1fs)",
            config.model, fold, epoch, train_loss, val, time.perf_counter() - start,
        )
    model.params.set_values(best_values)
    test = evaluate(model, split.test, config.k_obs, config.dt)
    return FoldResult(fold, best_epoch, best_val, test, model.to_checkpoint(), history)


def load_split(config: RunConfig) -> DatasetSplit:
    if config.dataset:
        return DatasetSplit.read(config.dataset)
    if config.generator:
        gen = dict(config.generator)
        kind = gen.pop("kind")
        sim_config = gen.pop("config", None)
        if sim_config is not None:
            sim_config = config_from_dict(kind, sim_config)
        return generate_dataset(kind, config=sim_config, **gen)
    raise ValueError("config needs either 'dataset' or 'generator'")


def _train_fold_job(args):
    config, split, fold, n_a = args
    return train_fold(config, split, fold, n_a)


def train(
    config: RunConfig,
    split: DatasetSplit | None = None,
    run_dir=None,
    pairs: list[CounterfactualPair] | None = None,
) -> tuple[Metrics, list[FoldResult]]:
    """Run ``config.folds`` repetitions; optionally write a run directory."""
    split = split if split is not None else load_split(config)
    check_protocol(config, split)
    n_a = infer_n_a(split.train + split.val + split.test)
    jobs = [(config, split, fold, n_a) for fold in range(config.folds)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_train_fold_job, jobs))
    else:
        results = [_train_fold_job(j) for j in jobs]
    cf = None
    if pairs:
        cf = [evaluate_counterfactual(load_checkpoint(r.checkpoint), pairs, config.dt) for r in results]
    metrics = Metrics([r.val_mse for r in results], [r.test_mse for r in results], cf)
    if run_dir is not None:
        write_run_dir(run_dir, config, metrics, results)
    return metrics, results


def protocol_of(config: RunConfig) -> dict:
    return {"dt": config.dt, "k_obs": config.k_obs, "horizon": config.horizon}


def write_run_dir(run_dir, config: RunConfig, metrics: Metrics, results: list[FoldResult]) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(asdict(config), indent=2))
    (run_dir / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2))
    protocol = protocol_of(config)
    for r in results:
        (run_dir / f"checkpoint_fold{r.fold}.json").write_text(json.dumps({**r.checkpoint, "protocol": protocol}))
    best = min(results, key=lambda r: r.val_mse)
    (run_dir / "checkpoint.json").write_text(json.dumps({**best.checkpoint, "protocol": protocol}))
    with open(run_dir / "losses.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["fold", "epoch", "train_loss", "val_mse"])
        w.writeheader()
        for r in results:
            w.writerows(r.history)
    return run_dir


# ------------------------------------------------------------------ traces


def export_trace(model, episode: Episode, path, k_obs: int, dt: float):
    """Latent-norm trace of one episode (prefix + rollout) written as CSV."""
    batch = make_batch([episode], model.dims.n_a)
    _, trace = model.predict(batch, k_obs, dt, record=True)
    truths = {float(t): episode.x[k] for k, t in enumerate(episode.times)}
    write_trace_csv(trace, path, truths, dt=dt)
    return trace
