"""
Profiles and per-class optima
=============================

Load the shipped Llama2-70B profile, look at how energy and latency move
with tensor parallelism and GPU frequency, and find the cheapest
configuration for each request class.
"""

from greenpool.optimizer import best_config, solve_exact
from greenpool.profiles import load_profile

profile = load_profile()
print(f"model {profile.model}: TP {profile.tps}, frequencies {profile.freqs} MHz")

# One medium/medium workload at 2000 prompt tokens per second, every
# (tp, freq) cell.  Cells that miss the SLO print as '-'.
print("\nMM @ 2000 TPS, energy Wh per window")
print("TP   " + " ".join(f"{f:>6d}" for f in profile.freqs))
for tp in profile.tps:
    cells = []
    for f in profile.freqs:
        pt = profile.query("MM", 2000, tp, f)
        ok = pt.ttft <= profile.slo.ttft_slo("MM") and pt.tbt <= profile.slo.tbt_slo("MM")
        cells.append(f"{pt.energy:6.2f}" if ok else "     -")
    print(f"TP{tp:<2d} " + " ".join(cells))

# The cheapest feasible single instance per class.
print("\nleast-energy instance per class at 2000 TPS")
for cls in profile.classes:
    tp, f, e = best_config(profile, cls, 2000)
    print(f"  {cls}: TP{tp} @ {f} MHz, {e:.2f} Wh")

# The right answer moves with load.
for load in (650, 2000, 4000):
    tp, f, e = best_config(profile, "MM", load)
    print(f"MM @ {load:4d} TPS -> TP{tp} @ {f} MHz ({e:.2f} Wh)")

# With a whole node, the fleet solver may split the load across instances.
fleet = solve_exact(profile, "MM", 6000, 8)
print("\nMM @ 6000 TPS on 8 GPUs:",
      ", ".join(f"{g.count}xTP{g.tp}@{g.freq}" for g in fleet.groups), f"= {fleet.energy:.2f} Wh")
