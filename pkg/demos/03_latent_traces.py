"""Watch the intervention latent of the decay variant spike and fade.

After a short training run on Exponential Decay, the trace of one test
episode is written to CSV and the norm of z_a is printed as a text strip,
with the intervention times marked underneath.
"""

import sys

import numpy as np

from imode_lab.harness import RunConfig, export_trace, load_checkpoint, train
from imode_lab.hybrid_ode import read_trace_csv
from imode_lab.simulators import EXP_DECAY, generate_dataset

out = sys.argv[1] if len(sys.argv) > 1 else "decay_trace.csv"
split = generate_dataset(EXP_DECAY, n_train=60, n_val=20, n_test=20, seed=2)
_, results = train(RunConfig(model="imode_decay", epochs=30, folds=1, dt=1.0), split)
model = load_checkpoint(results[0].checkpoint)
print(f"alpha (learned decay rate of z_a): {model.alpha:.3f}")

episode = max(split.test, key=lambda ep: len(ep.interventions))
export_trace(model, episode, out, k_obs=10, dt=1.0)
cols = read_trace_csv(out)
za = cols["norm_za"]

levels = " .:-=+*#%@"
scaled = np.round(za / za.max() * (len(levels) - 1)).astype(int)
hits = {int(t) for t, _ in episode.interventions}
print("|z_a| ", "".join(levels[s] for s in scaled))
print("event ", "".join("^" if int(t) in hits else " " for t in cols["t"]))
print(f"trace written to {out} ({len(za)} points)")
