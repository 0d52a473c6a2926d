"""Look at the two synthetic worlds before training anything.

Moving Ball: a ball drifting in a straight line, knocked off course whenever
another ball hits it.  Exponential Decay: a 2-D point whose velocity follows a
linear law, plus an intervention effect that halves every step.
"""

import numpy as np

from imode_lab.simulators import (
    EXP_DECAY,
    MOVING_BALL,
    elastic_collision,
    make_counterfactual_pair,
    simulate_exponential_decay,
    simulate_moving_ball,
)

# One collision, head on: the moving ball stops and the resting one takes over.
v1, v2 = elastic_collision([0.0, 0.0], [1.0, 0.0], [0.1, 0.0], [0.0, 0.0])
print("head-on collision ->", v1, v2)

ball = simulate_moving_ball(seed=0)
print(f"\nMoving Ball episode: {len(ball)} steps, collisions at t = {[int(t) for t, _ in ball.interventions]}")
speed = np.linalg.norm(np.diff(ball.x, axis=0), axis=1)
for t, a in ball.interventions:
    k = int(t)
    print(f"  t={k:2d}  speed {speed[k - 1]:.3f} -> {speed[k]:.3f}   striker at {a[:2].round(3)} moving {a[2:].round(3)}")

decay, hidden = simulate_exponential_decay(seed=3, return_hidden=True)
print(f"\nExponential Decay episode: interventions at t = {[int(t) for t, _ in decay.interventions]}")
effect = np.linalg.norm(hidden["e"], axis=1)
print("  |effect| over the first 20 steps:", " ".join(f"{v:.2f}" for v in effect[:20]))

# Counterfactual pairs share ten steps, then split: A gets an intervention, B does not.
for kind in (MOVING_BALL, EXP_DECAY):
    pair = make_counterfactual_pair(kind, seed=5)
    gap = np.linalg.norm(pair.branch_a.x - pair.branch_b.x, axis=1)
    print(f"\n{kind} pair: branch distance by step")
    print("  " + " ".join(f"{g:.2f}" for g in gap))
