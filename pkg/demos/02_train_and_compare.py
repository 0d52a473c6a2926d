"""Train two IMODE variants and two baselines on a small Moving Ball set.

This is a quick look (a few minutes on one core), far below the budget used by
the acceptance suite, so expect noisy numbers.  Every model sees ten observed
steps, then rolls out forty more knowing only when and how the ball gets hit.
"""

import numpy as np

from imode_lab.episodes import make_batch
from imode_lab.harness import RunConfig, load_checkpoint, train
from imode_lab.simulators import MOVING_BALL, generate_dataset, generate_pairs

split = generate_dataset(MOVING_BALL, n_train=80, n_val=30, n_test=30, seed=0)
pairs = generate_pairs(MOVING_BALL, 30, seed=1_000_003)

rows, best = [], {}
for model in ("imode_switch", "imode_general", "odernn", "gru_dt"):
    metrics, results = train(RunConfig(model=model, epochs=25, folds=2, dt=1.0), split, pairs=pairs)
    d = metrics.to_dict()
    rows.append((model, d["test_mse"]["mean"], d["test_mse"]["std"], d["cf_mse"]["mean"]))
    best[model] = load_checkpoint(min(results, key=lambda r: r.val_mse).checkpoint)
    print(f"{model:14s} best epochs {[r.best_epoch for r in results]}")

print(f"\n{'model':14s} {'test MSE':>10s} {'± std':>8s} {'CF MSE':>10s}")
for model, mean, std, cf in rows:
    print(f"{model:14s} {mean:10.4f} {std:8.4f} {cf:10.4f}")

# How far apart does each model put the two futures of one pair?
pair = pairs[0]
truth = np.linalg.norm(pair.branch_a.x[-1] - pair.branch_b.x[-1])
print(f"\ntrue gap between the branches at the last step: {truth:.3f}")
for model, m in best.items():
    pa, _ = m.predict(make_batch([pair.branch_a], 4), 10, 1.0)
    pb, _ = m.predict(make_batch([pair.branch_b], 4), 10, 1.0)
    print(f"  {model:14s} predicted gap {np.linalg.norm(pa[-1][0] - pb[-1][0]):.3f}")
