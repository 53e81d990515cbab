"""Slow, independently written reference solvers used only by the tests."""

import itertools
from functools import lru_cache

import numpy as np

from greenpool.reshard import N_GPUS, shard_block

Q = 10


def fleet_oracle(profile, cls, load, budget, freqs=None, slo=None):
    """Brute force over instance counts, load splits and one frequency per TP.

    Returns (energy, gpus) of the cheapest plan or None.  Feasibility is the
    raw latency lookup against the SLO, energy the raw profile energy.
    """
    freqs = tuple(profile.freqs if freqs is None else freqs)
    ttft_slo, tbt_slo = (slo or profile.slo).slo(cls)
    tps = sorted(profile.tps)

    @lru_cache(maxsize=None)
    def vec(tp, n, k):
        x = load * k / (Q * n)
        out = np.full(len(freqs), np.inf)
        for j, f in enumerate(freqs):
            pt = profile.query(cls, x, tp, f)
            if pt.ttft <= ttft_slo and pt.tbt <= tbt_slo:
                out[j] = n * pt.energy
        return out

    if load == 0:
        return 0.0, 0
    best = None
    ranges = [range(budget // tp + 1) for tp in tps]
    for counts in itertools.product(*ranges):
        gpus = sum(tp * n for tp, n in zip(tps, counts))
        if gpus > budget or gpus == 0:
            continue
        active = [i for i, n in enumerate(counts) if n]
        for ks in itertools.product(range(1, Q + 1), repeat=len(active)):
            if sum(ks) != Q:
                continue
            parts = dict(zip(active, ks))
            total = None
            for i, tp in enumerate(tps):
                v = vec(tp, counts[i], parts[i]) if i in parts else np.zeros(1)
                total = v if total is None else np.add.outer(total, v).ravel()
            e = float(total.min())
            if np.isinf(e):
                continue
            if best is None or (e, gpus) < best:
                best = (e, gpus)
    return best


def _need_of(layout_tps):
    need = []
    for tp in layout_tps:
        for pos in range(tp):
            need.append(shard_block(tp, pos))
    return need


def _min_bottleneck(missing, holders):
    """Smallest per-link load for fetching ``missing`` shards, by backtracking."""
    if not missing:
        return 0
    for cap in range(1, len(missing) + 1):
        used = {}

        def place(i):
            if i == len(missing):
                return True
            for src in holders[missing[i]]:
                if used.get(src, 0) < cap:
                    used[src] = used.get(src, 0) + 1
                    if place(i + 1):
                        return True
                    used[src] -= 1
            return False

        if place(0):
            return cap
    raise AssertionError("unreachable")


def reshard_oracle(src_layout, dst_tps):
    """Try every slot->GPU assignment.

    Returns (fewest shards moved, shortest parallel time among assignments
    that move that few).
    """
    held = src_layout.shards()
    holders = {}
    for g, sh in enumerate(held):
        for s in sh:
            holders.setdefault(s, []).append(g)
    need = _need_of(sorted(dst_tps, reverse=True))
    best_moved, best_time = None, None
    seen = {}
    for perm in itertools.permutations(range(N_GPUS), len(need)):
        per_gpu = [frozenset()] * N_GPUS
        for want, g in zip(need, perm):
            per_gpu[g] = want
        key = tuple(per_gpu)
        if key in seen:
            continue
        moved = sum(len(w - held[g]) for g, w in enumerate(per_gpu))
        seen[key] = moved
        if best_moved is not None and moved > best_moved:
            continue
        t = max((_min_bottleneck(sorted(w - held[g]), holders)
                 for g, w in enumerate(per_gpu)), default=0)
        if best_moved is None or moved < best_moved:
            best_moved, best_time = moved, t
        else:
            best_time = min(best_time, t)
    return best_moved, best_time
