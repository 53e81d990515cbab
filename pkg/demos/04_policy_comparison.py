"""
Comparing policies on the shipped trace
=======================================

One hour of synthetic Conversation traffic, shaped like a day compressed
24 times, run under each policy.  Takes about a minute.
"""

from dataclasses import replace

from greenpool import sim
from greenpool.cli import load_spec
from greenpool.control import ServiceModel
from greenpool.profile_data import data_dir

spec = load_spec(data_dir() / "conversation_1h.ini")
requests = spec.load_trace()
profile = spec.load_profile()
model = ServiceModel(profile)
grid = sim.CarbonTrace.from_csv(data_dir() / "carbon_1h.csv")
print(f"{len(requests)} requests over {requests[-1].arrival / 1000:.0f} s")

reports = {}
for policy in sim.POLICIES:
    r = sim.run(replace(spec.sim, policy=policy), requests, profile, model)
    reports[policy] = r
    _, kg = sim.carbon(r, grid)
    usd = sim.cost(r, spec.sim.gpu_price_hr, spec.sim.energy_price_kwh)["total"]
    print(f"{policy:10s} {r.total_energy_wh / 1000:6.1f} kWh  {kg:5.1f} kg  ${usd:6.1f}  "
          f"mean nodes {r.summary()['mean_nodes']:5.1f}  SLO misses {r.violation_rate():.4f}")

base = reports["SinglePool"].total_energy_wh
for policy, r in reports.items():
    print(f"{policy:10s} saves {1 - r.total_energy_wh / base:6.1%} vs SinglePool")

# Where the energy went, by true request class.
print("\nAllKnobs energy by class (Wh):")
for cls, wh in reports["AllKnobs"].energy_by_class_wh.items():
    print(f"  {cls}: {wh:8.0f}")
