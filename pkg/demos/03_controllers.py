"""
The three controller levels
===========================

The cluster level sizes per-class pools from a load forecast, the pool
level re-shards nodes, and the instance level picks a GPU frequency.
Each one is a pure function from state to actions.
"""

import numpy as np

from greenpool.control import (
    ControllerConfig, InstanceState, NodeState, ServiceModel, cluster_epoch, instance_epoch,
    make_cluster, pool_capacity, pool_epoch, pool_groups,
)
from greenpool.optimizer import OverheadTable
from greenpool.profiles import load_profile
from greenpool.workload import CLASS_INDEX, CLASSES, LoadForecast

profile = load_profile()

# Cluster level: MM and LL each need 2.5 nodes.  Every pool but the last
# rounds down and passes its leftover along; the LL pool picks it up.
state = make_cluster(pool_groups(9), capacity_nodes=64)
forecast = LoadForecast({c: 0.0 for c in CLASSES} | {
    "MM": 2.5 * pool_capacity(profile, {"MM": 1.0}, ("MM",)),
    "LL": 2.5 * pool_capacity(profile, {"LL": 1.0}, ("LL",)),
})
plan = cluster_epoch(state, forecast, profile)
for a in plan.actions:
    if a.nodes or a.overflow_fraction < 1:
        print(f"pool {state.pools[a.pool].name}: {a.nodes} nodes, forwards {a.overflow_fraction:.0%}")

# Pool level: four TP8 nodes in the MM pool see only 650 TPS each.  Two
# of them move to TP4 at low clock this epoch; the other two wait.
pool = state.pools[CLASS_INDEX["MM"]]
for k in range(4):
    node = NodeState(k, pool.index)
    node.instances = [InstanceState(k, 8, 1980, node)]
    pool.nodes.append(node)
loads = np.zeros(len(CLASSES))
loads[CLASS_INDEX["MM"]] = 4 * 650
for act in pool_epoch(pool, loads, profile, OverheadTable(), ControllerConfig(), now=0.0):
    print(f"node {act.node}: -> {act.layout} @ {act.freqs} MHz, saves {act.benefit_wh:.1f} Wh "
          f"per epoch, {act.seconds:.2f} s, {act.downtime}")

# Instance level: a TP4 instance carrying 2000 TPS of MM can run at 1600 MHz.
model = ServiceModel(profile)
inst = InstanceState(99, 4, 1980)
inst.loads[CLASS_INDEX["MM"]] = 2000
print("instance epoch:", instance_epoch(inst, model, headroom=1.0))
