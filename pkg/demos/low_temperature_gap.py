"""Per-step temperature is not the sequence-level power distribution.

The first token looks 50/50 locally, but one branch leads into a confident
continuation, so the alpha = 2 power target favours it.

    python3 demos/low_temperature_gap.py
"""
from powerflow import oracle
from powerflow.bases import mismatch_instance
from powerflow.target import TargetSpec, temperature_scaled_policy

base = mismatch_instance()
target = oracle.exact_target_dist(base, 0, TargetSpec(2.0))
low = oracle.policy_dist(temperature_scaled_policy(base, 2.0), 0)

print(f"{'sequence':>10} {'base':>7} {'low-temp':>9} {'power':>7}")
base_dist = oracle.policy_dist(base, 0)
for y, b, l, t in zip(target.support, base_dist.probs, low.probs, target.probs):
    if max(b, l, t) > 0:
        print(f"{' '.join(map(str, y.tokens)):>10} {b:7.4f} {l:9.4f} {t:7.4f}")
print(f"\nTV(low-temp, power target) = {oracle.tv(low, target):.4f}")
