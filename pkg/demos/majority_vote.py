"""Self-rewarding by majority vote locks onto the initial mode.

    python3 demos/majority_vote.py
"""
import numpy as np

from powerflow.mvsim import VoteConfig, expected_majority_reward, run_dynamics

pi0 = np.array([0.4, 0.3, 0.2, 0.1])
for n in (2, 3, 5, 8):
    run = run_dynamics(pi0, VoteConfig(n_votes=n))
    mode = run.mode_probs()
    hit = int(np.argmax(mode > 0.999))
    print(f"N={n}: rbar at start {np.round(run.steps[0].rbar, 4)}, mode passes 0.999 after {hit} updates,"
          f" {len(run.steps) - 1} updates to 1 - 1e-9")

# a weak initial preference is enough; only the speed depends on the margin
for eps in (0.2, 0.05, 0.01):
    run = run_dynamics([0.5 + eps / 2, 0.5 - eps / 2], VoteConfig(n_votes=5))
    print(f"margin {eps:<5} -> {len(run.steps) - 1} updates")

print("\nvote reward sums to one under 'selected' credit:",
      expected_majority_reward(pi0, VoteConfig(4)).sum())
print("but not under 'membership' credit:",
      expected_majority_reward(pi0, VoteConfig(4, tie_mode="membership")).sum())
