"""Trajectory-level sharpening collapses length; the length-aware loss does not.

Trains four objectives on the two-mode base (a short confident answer versus a
long repetitive one) and prints how the sampled length evolves next to the
exact oracle means.

    python3 demos/length_dynamics.py [steps]
"""
import sys

import numpy as np

from powerflow import oracle
from powerflow.bases import two_mode_base
from powerflow.target import TargetSpec
from powerflow.trainer import TrainConfig, compare_dynamics, metric_table

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
base = two_mode_base(n_queries=4)
spec = TargetSpec(4.0)

base_mean = oracle.dist_stats(oracle.policy_dist(base, 0))[0]
tb_mean = oracle.dist_stats(oracle.exact_target_dist(base, 0, spec))[0]
la_mean = oracle.dist_stats(oracle.exact_la_target(base, 0, spec)[0])[0]
print(f"base mean length {base_mean:.3f}")
print(f"power target     {tb_mean:.3f}  (what tb_traj and rl_traj chase)")
print(f"length-aware     {la_mean:.3f}  (what la_tb chases)\n")

configs = [
    TrainConfig(losskind="tb_traj", target=spec, steps=steps),
    TrainConfig(losskind="rl_traj", target=spec, beta=1 / 3, steps=steps),
    TrainConfig(losskind="tb_token", target=spec, steps=steps),
    TrainConfig(losskind="la_tb", target=TargetSpec(4.0, length_aware=True), steps=steps),
]
results = compare_dynamics(configs, base)
lengths = metric_table(results, "mean_sampled_length")

window = 50
print("step   " + "  ".join(f"{k:>9}" for k in lengths))
for s in range(window, steps + 1, max(steps // 10, window)):
    row = [np.mean(v[s - window:s]) for v in lengths.values()]
    print(f"{s:5d}  " + "  ".join(f"{x:9.3f}" for x in row))

longest = base.space.index[(1,) * 8]
ratio = oracle.policy_dist(results["tb_token"].policy, 0).probs[longest] / oracle.policy_dist(base, 0).probs[longest]
print(f"\ntb_token moved {ratio:.1f}x the base mass onto the 8-token repetition")
