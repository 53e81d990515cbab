"""
Re-sharding a node
==================

Turning one tensor-parallel layout into another only copies the weight
shards a GPU does not already hold.  The planner matches target slots to
GPUs so as many shards as possible stay put, then spreads the copies over
distinct NVLink pairs.
"""

from greenpool.reshard import NAMED_LAYOUTS, TABLE_ORDER, full_table, plan

# TP4 -> TP8: GPUs 0-3 each hold a quarter of the model, GPUs 4-7 are empty.
p = plan(NAMED_LAYOUTS["TP4"], [8])
print("TP4 -> TP8")
for src, dst, n in p.transfers:
    print(f"  GPU{src} -> GPU{dst}: {n} shard(s)")
print(f"  {p.moved} shards moved, {p.parallel_time} T in parallel, downtime {p.downtime}")

# The full transition table, in units of T (one shard over one link).
table = full_table()
print("\nfrom\\to  " + " ".join(f"{name:>7s}" for name in TABLE_ORDER))
for name, row in zip(TABLE_ORDER, table):
    print(f"{name:8s} " + " ".join(f"{v:7d}" for v in row))

# Splitting one big instance into small ones is the expensive direction.
for src, dst in (("TP8", [2, 2, 2, 2]), ("TP2", [2, 2, 2, 2]), ("2TP4", [4, 2, 2])):
    p = plan(NAMED_LAYOUTS[src], dst)
    print(f"{src} -> {dst}: {p.parallel_time} T, peak {p.memory_peak} shards on one GPU, {p.downtime}")
