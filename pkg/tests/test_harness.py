import csv
import json

import numpy as np
import pytest

from imode_lab import autodiff as ad
from imode_lab.episodes import DatasetSplit, Episode, make_batch
from imode_lab.harness import (
    Metrics,
    RunConfig,
    TrainingError,
    build_model,
    evaluate,
    evaluate_counterfactual,
    export_trace,
    load_checkpoint,
    read_checkpoint,
    train,
    train_fold,
)
from imode_lab.harness.training import fold_seed, full_scale, per_episode_mse, per_pair_cf_mse
from imode_lab.hybrid_ode import read_trace_csv
from imode_lab.imode import reconstruction_loss
from imode_lab.simulators import EXP_DECAY, MOVING_BALL, generate_dataset, generate_pairs

SMALL = dict(hidden=8, latent=8, dt=1.0)


@pytest.fixture(scope="module")
def decay_split():
    return generate_dataset(EXP_DECAY, 10, 6, 6, seed=3)


@pytest.fixture(scope="module")
def ball_split():
    return generate_dataset(MOVING_BALL, 10, 6, 6, seed=4)


def zeroed(model):
    for _, p in model.params.items():
        p.value = np.zeros_like(p.value)
    return model


def resting_episodes(n, seed=0):
    """Balls at rest: a zero-parameter switch model predicts them exactly."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = np.repeat(rng.uniform(0, 1, (1, 2)), 50, axis=0)
        hits = sorted(rng.choice(np.arange(1, 50), 3, replace=False))
        out.append(Episode(np.arange(50.0), x, [(float(t), rng.normal(size=4)) for t in hits]))
    return out


# ----------------------------------------------------------------- config


def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(model="lstm")
    with pytest.raises(ValueError):
        RunConfig(folds=0)
    with pytest.raises(ValueError):
        RunConfig(lr=0.0)
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"epochs": 3, "learning_rate": 0.1})
    assert RunConfig.from_dict({"epochs": 0}).epochs == 0


def test_full_scale_settings():
    assert full_scale(MOVING_BALL) == {"dt": 0.01, "batch_size": 32, "lr": 1e-3, "folds": 5, "epochs": 1000}
    assert full_scale(EXP_DECAY)["epochs"] == 1500


def test_protocol_length_must_match_episodes(decay_split):
    with pytest.raises(ValueError, match="k_obs \\+ horizon"):
        train(RunConfig(model="odernn", epochs=0, folds=1, horizon=30, **SMALL), decay_split)


# --------------------------------------------------------------- training


def test_zero_epochs_evaluates_initial_model(decay_split):
    config = RunConfig(model="imode_decay", epochs=0, folds=1, **SMALL)
    r = train_fold(config, decay_split, 0)
    assert r.best_epoch == 0 and len(r.history) == 1
    assert r.val_mse == evaluate(load_checkpoint(r.checkpoint), decay_split.val, 10, 1.0)


def test_tiny_run_decreases_training_loss(decay_split):
    config = RunConfig(model="imode_general", epochs=5, folds=1, dt=1.0)
    r = train_fold(config, decay_split, 0)
    untrained = build_model("imode_general", 2, 2, fold_seed(0, 0))
    initial = evaluate(untrained, decay_split.train, 10, 1.0)
    assert r.history[-1]["train_loss"] < initial
    trained = load_checkpoint(r.checkpoint)
    if r.best_epoch > 0:
        assert evaluate(trained, decay_split.train, 10, 1.0) < initial


def test_training_moves_parameters_and_tracks_best(decay_split):
    r = train_fold(RunConfig(model="gru_decay", epochs=3, folds=1, **SMALL), decay_split, 0)
    vals = [h["val_mse"] for h in r.history]
    assert r.val_mse == min(vals) and vals[r.best_epoch] == r.val_mse


def test_eval_on_val_reproduces_selection_value(decay_split):
    r = train_fold(RunConfig(model="imode_switch", epochs=3, folds=1, **SMALL), decay_split, 1)
    assert evaluate(load_checkpoint(r.checkpoint), decay_split.val, 10, 1.0) == r.val_mse
    assert evaluate(load_checkpoint(r.checkpoint), decay_split.test, 10, 1.0) == r.test_mse


def test_nan_loss_aborts_fold(decay_split):
    bad = decay_split.train[0]
    x = bad.x.copy()
    x[20] = np.nan
    split = DatasetSplit([Episode(bad.times, x, bad.interventions)], decay_split.val, decay_split.test)
    with pytest.raises(TrainingError, match="fold 0 epoch 1"):
        train_fold(RunConfig(model="odernn", epochs=1, folds=1, **SMALL), split, 0)


def test_metrics_aggregates_match_per_fold(decay_split):
    metrics, results = train(RunConfig(model="gru_dt", epochs=1, folds=3, **SMALL), decay_split)
    d = metrics.to_dict()
    assert d["folds"] == 3 == len(results)
    for key in ("val_mse", "test_mse"):
        values = d[key]["per_fold"]
        assert d[key]["mean"] == float(np.mean(values))
        assert d[key]["std"] == float(np.std(values, ddof=0))
    assert len({r.val_mse for r in results}) == 3  # folds really differ


def test_folds_are_reproducible_and_worker_independent(decay_split):
    config = RunConfig(model="imode_decay", epochs=2, folds=2, **SMALL)
    _, serial = train(config, decay_split)
    _, again = train(config, decay_split)
    parallel_config = RunConfig(model="imode_decay", epochs=2, folds=2, workers=2, **SMALL)
    _, parallel = train(parallel_config, decay_split)
    for a, b, c in zip(serial, again, parallel):
        assert a.test_mse == b.test_mse == c.test_mse
        assert a.checkpoint == b.checkpoint == c.checkpoint


def test_run_directory(tmp_path, ball_split):
    pairs = generate_pairs(MOVING_BALL, 4, 9)
    config = RunConfig(model="imode_switch", epochs=2, folds=2, **SMALL)
    metrics, results = train(config, ball_split, run_dir=tmp_path / "run", pairs=pairs)
    run = tmp_path / "run"
    names = {p.name for p in run.iterdir()}
    assert names == {"config.json", "metrics.json", "losses.csv", "checkpoint.json",
                     "checkpoint_fold0.json", "checkpoint_fold1.json"}
    assert json.loads((run / "config.json").read_text())["model"] == "imode_switch"
    assert json.loads((run / "metrics.json").read_text()) == json.loads(json.dumps(metrics.to_dict()))
    rows = list(csv.DictReader(open(run / "losses.csv")))
    assert len(rows) == 2 * 3
    model, protocol = read_checkpoint(run / "checkpoint.json")
    assert protocol == {"dt": 1.0, "k_obs": 10, "horizon": 40}
    best = min(results, key=lambda r: r.val_mse)
    assert evaluate(model, ball_split.val, 10, 1.0) == best.val_mse
    assert metrics.cf_mse == [evaluate_counterfactual(load_checkpoint(r.checkpoint), pairs, 1.0) for r in results]


def test_metrics_without_cf():
    m = Metrics([1.0, 3.0], [2.0, 4.0])
    d = m.to_dict()
    assert "cf_mse" not in d and d["test_mse"]["std"] == 1.0


# ------------------------------------------------------------- evaluation


@pytest.mark.parametrize("kind", ["imode_general", "odernn", "gru_dt"])
def test_eval_is_mean_of_per_episode_losses(kind, decay_split):
    model = build_model(kind, 2, 2, 5, 8, 8)
    eps = decay_split.test
    first = evaluate(model, eps, 10, 1.0)
    assert evaluate(model, eps, 10, 1.0) == first
    singles = []
    for ep in eps:
        preds, _ = model.predict(make_batch([ep], 2), 10, 1.0)
        singles.append(float(reconstruction_loss([ad.tensor(p) for p in preds], list(ep.x[10:, None])).value))
    assert first == pytest.approx(np.mean(singles), rel=1e-12)
    if not kind.startswith("gru"):
        # rollout-trained models optimise exactly this quantity
        assert float(model.loss(make_batch([eps[0]], 2), 10, 1.0).value) == pytest.approx(singles[0], rel=1e-12)


def test_oracle_checkpoint_scores_zero():
    model = load_checkpoint(zeroed(build_model("imode_switch", 2, 4, 0)).to_checkpoint())
    eps = resting_episodes(5)
    assert evaluate(model, eps, 10, 1.0) == 0.0
    assert np.all(per_episode_mse(model, eps, 10, 0.25) == 0.0)


def test_intervention_blind_model_predicts_identical_branches():
    model = build_model("imode_switch", 2, 4, 3)
    for name in model.params.names():
        if name.startswith("g_a."):
            model.params[name].value = np.zeros_like(model.params[name].value)
    for pair in generate_pairs(MOVING_BALL, 3, 0):
        pa, _ = model.predict(make_batch([pair.branch_a], 4), 10, 1.0)
        pb, _ = model.predict(make_batch([pair.branch_b], 4), 10, 1.0)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(pa, pb))


def test_cf_score_covers_only_branch_steps():
    model = build_model("odernn", 2, 2, 1, 8, 8)
    pairs = generate_pairs(EXP_DECAY, 4, 2)
    per = per_pair_cf_mse(model, pairs, 1.0)
    for pair, value in zip(pairs, per):
        parts = []
        for branch in (pair.branch_a, pair.branch_b):
            preds, _ = model.predict(make_batch([branch], 2), 10, 1.0)
            err = np.stack(preds, axis=1)[0] - branch.x[10:]
            assert err.shape == (10, 2)
            parts.append(np.mean(np.sum(err**2, axis=1)))
        assert value == pytest.approx(np.mean(parts), rel=1e-12)
    with pytest.raises(ValueError):
        per_pair_cf_mse(model, [], 1.0)


# ---------------------------------------------------------------- traces


def _intervals(event_times, t):
    edges = [0.0, *sorted(event_times), float(t[-1]) + 1.0]
    for lo, hi in zip(edges, edges[1:]):
        if hi > lo:
            yield lo, hi


def test_switch_trace_latents_constant_between_events(tmp_path):
    model = build_model("imode_switch", 2, 4, 2)
    ep = generate_dataset(MOVING_BALL, 1, 1, 1, seed=5).test[0]
    trace = export_trace(model, ep, tmp_path / "s.csv", 10, 0.25)
    cols = read_trace_csv(tmp_path / "s.csv")
    assert set(cols) >= {"t", "event", "norm_h", "norm_zx", "norm_za"}
    t = cols["t"]
    for lo, hi in _intervals(trace.event_times, t):
        inside = (t >= lo) & (t < hi)
        assert np.ptp(cols["norm_zx"][inside]) == 0.0 and np.ptp(cols["norm_za"][inside]) == 0.0


def test_decay_trace_za_decreases_after_intervention(tmp_path):
    model = build_model("imode_decay", 2, 2, 4)
    ep = next(e for e in generate_dataset(EXP_DECAY, 30, 1, 1, seed=6).train if len(e.interventions) >= 2)
    trace = export_trace(model, ep, tmp_path / "d.csv", 10, 0.5)
    cols = read_trace_csv(tmp_path / "d.csv")
    t, za = cols["t"], cols["norm_za"]
    first = ep.interventions[0][0]
    checked = 0
    for lo, hi in _intervals(trace.event_times, t):
        if lo < first:
            continue
        seg = za[(t >= lo) & (t < hi)]
        if len(seg) > 1:
            assert np.all(np.diff(seg) < 0)
            checked += 1
    assert checked > 0
    # event markers line up with observation and intervention times
    assert set(t[cols["event"] == 1]) == set(trace.event_times)


@pytest.mark.parametrize("kind", ["gru_dt", "gru_decay", "odernn"])
def test_baseline_traces_have_only_norm_h(kind, tmp_path):
    model = build_model(kind, 2, 2, 0, 8, 8)
    ep = generate_dataset(EXP_DECAY, 1, 1, 1, seed=1).test[0]
    export_trace(model, ep, tmp_path / "b.csv", 10, 1.0)
    header = (tmp_path / "b.csv").read_text().splitlines()[0].split(",")
    assert "norm_h" in header and "norm_zx" not in header and "norm_za" not in header
    assert header[-4:] == ["xhat_0", "xhat_1", "x_0", "x_1"]
