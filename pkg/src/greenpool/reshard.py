"""Weight re-sharding between tensor-parallel layouts on one 8-GPU node.

The model is cut into 8 equal shards.  A GPU at position ``i`` of a TPk
instance holds the contiguous block of ``8 // k`` shards starting at
``i * 8 // k``.  Shards are interchangeable across instances, so a GPU that
needs shard 3 may copy it from any GPU currently holding shard 3.

Transfers between distinct (src, dst) GPU pairs run concurrently over
NVLink; shards on one pair go one after another.  The re-shard time is
therefore the busiest pair's shard count, in units of T.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

N_GPUS = 8
N_SHARDS = 8
VALID_TPS = (1, 2, 4, 8)

NONE = "none"
REDUCED = "reduced_throughput"
FULL_STOP = "full_stop"
DOWNTIME_ORDER = (NONE, REDUCED, FULL_STOP)

# Llama2-70B in fp16 over 8 shards, on 80 GB parts
SHARD_BYTES_70B = 17.5e9
GPU_MEM_BYTES = 80e9


class LayoutError(ValueError):
    pass


def shard_block(tp: int, pos: int) -> frozenset:
    width = N_SHARDS // tp
    return frozenset(range(pos * width, (pos + 1) * width))


@dataclass(frozen=True)
class Layout:
    """Instances placed on physical GPUs: a tuple of (tp, gpu ids in shard order)."""

    instances: tuple[tuple[int, tuple[int, ...]], ...]

    def __post_init__(self):
        seen = set()
        for tp, gpus in self.instances:
            if tp not in VALID_TPS:
                raise LayoutError(f"unsupported tensor parallelism {tp}")
            if len(gpus) != tp:
                raise LayoutError(f"TP{tp} instance placed on {len(gpus)} GPUs")
            for g in gpus:
                if not 0 <= g < N_GPUS:
                    raise LayoutError(f"GPU {g} outside 0..{N_GPUS - 1}")
                if g in seen:
                    raise LayoutError(f"GPU {g} used by two instances")
                seen.add(g)

    @classmethod
    def from_mix(cls, tps: Iterable[int]) -> "Layout":
        """Pack instances largest first onto consecutive GPUs."""
        tps = sorted(tps, reverse=True)
        if sum(tps) > N_GPUS:
            raise LayoutError(f"instance mix {tps} needs {sum(tps)} GPUs, node has {N_GPUS}")
        out, g = [], 0
        for tp in tps:
            out.append((tp, tuple(range(g, g + tp))))
            g += tp
        return cls(tuple(out))

    @property
    def mix(self) -> tuple[int, ...]:
        return tuple(sorted((tp for tp, _ in self.instances), reverse=True))

    @property
    def gpus_used(self) -> int:
        return sum(tp for tp, _ in self.instances)

    def shards(self) -> list[frozenset]:
        held = [frozenset()] * N_GPUS
        for tp, gpus in self.instances:
            for pos, g in enumerate(gpus):
                held[g] = shard_block(tp, pos)
        return held

    def owner(self) -> list[int | None]:
        """Instance index serving on each GPU, None when idle."""
        own = [None] * N_GPUS
        for i, (_, gpus) in enumerate(self.instances):
            for g in gpus:
                own[g] = i
        return own

    def name(self) -> str:
        counts = {}
        for tp in self.mix:
            counts[tp] = counts.get(tp, 0) + 1
        parts = [f"{n}TP{tp}" if n > 1 else f"TP{tp}" for tp, n in sorted(counts.items())]
        return "+".join(parts) or "empty"


NAMED_LAYOUTS = {
    "TP2": Layout.from_mix([2]),
    "4TP2": Layout.from_mix([2, 2, 2, 2]),
    "TP4": Layout.from_mix([4]),
    "TP2+TP4": Layout.from_mix([4, 2]),
    "2TP4": Layout.from_mix([4, 4]),
    "TP8": Layout.from_mix([8]),
}
TABLE_ORDER = ("TP2", "4TP2", "TP4", "TP2+TP4", "2TP4", "TP8")


@dataclass(frozen=True)
class ReshardPlan:
    src: Layout
    dst: Layout                            # physical placement chosen by the matching
    transfers: tuple[tuple[int, int, int], ...]   # (src GPU, dst GPU, shard count)
    shard_moves: tuple[tuple[int, int, int], ...]  # (src GPU, dst GPU, shard id)
    parallel_time: int                     # units of T
    stationary: int
    downtime: str
    memory_peak: int                       # shards resident on the fullest GPU mid-transition

    @property
    def moved(self) -> int:
        return len(self.shard_moves)


def _slots(tps: Sequence[int]):
    """Logical destination slots: (instance index, position, required shards)."""
    slots = []
    for i, tp in enumerate(tps):
        for pos in range(tp):
            slots.append((i, pos, shard_block(tp, pos)))
    return slots


def _pick_sources(missing: Sequence[int], holders: dict) -> tuple[int, dict]:
    """Choose a holder per missing shard, minimizing the busiest link into this GPU."""
    options = [holders[s] for s in missing]
    best, best_key = None, None
    for choice in itertools.product(*options):
        per = {}
        for src in choice:
            per[src] = per.get(src, 0) + 1
        key = (max(per.values()), len(per), choice)
        if best_key is None or key < best_key:
            best, best_key = choice, key
    return best


def _route(held: list, need: list):
    holders = {}
    for g, sh in enumerate(held):
        for s in sh:
            holders.setdefault(s, []).append(g)
    moves = []
    for g, want in enumerate(need):
        missing = sorted(want - held[g])
        if not missing:
            continue
        for s in missing:
            if s not in holders:
                raise LayoutError(f"shard {s} is not held by any GPU")
        for s, src in zip(missing, _pick_sources(missing, holders)):
            moves.append((src, g, s))
    return moves


def _link_time(moves) -> int:
    per = {}
    for src, dst, _ in moves:
        per[(src, dst)] = per.get((src, dst), 0) + 1
    return max(per.values(), default=0)


def transition_cost(src: Layout, assignment: Sequence[int], tps: Sequence[int]):
    """Moves and time for a given logical-slot -> physical-GPU assignment."""
    held = src.shards()
    need = [frozenset()] * N_GPUS
    for (_, _, want), g in zip(_slots(tps), assignment):
        need[g] = want
    moves = _route(held, need)
    return moves, _link_time(moves)


def _placement(tps, slots, assignment) -> Layout:
    gpus = [[None] * tp for tp in tps]
    for (i, pos, _), g in zip(slots, assignment):
        gpus[i][pos] = g
    return Layout(tuple((tp, tuple(gs)) for tp, gs in zip(tps, gpus)))


def _target_mix(dst) -> tuple[int, ...]:
    if isinstance(dst, Layout):
        tps = dst.mix
    elif isinstance(dst, str):
        tps = NAMED_LAYOUTS[dst].mix
    else:
        tps = tuple(sorted(dst, reverse=True))
    for tp in tps:
        if tp not in VALID_TPS:
            raise LayoutError(f"unsupported tensor parallelism {tp}")
    if sum(tps) > N_GPUS:
        raise LayoutError(f"target mix {tps} needs {sum(tps)} GPUs, node has {N_GPUS}")
    return tps


def plan(src: Layout, dst, shard_bytes: float = SHARD_BYTES_70B,
         gpu_mem_bytes: float = GPU_MEM_BYTES) -> ReshardPlan:
    """Re-shard ``src`` into the instance mix ``dst`` moving as little as possible.

    Logical GPUs of the target are matched to physical GPUs by maximum
    stationary overlap.  Among overlap-maximal matchings the one with the
    shortest parallel transfer time is kept.
    """
    if isinstance(src, str):
        src = NAMED_LAYOUTS[src]
    tps = _target_mix(dst)
    slots = _slots(tps)
    held = src.shards()
    overlap = np.zeros((N_GPUS, N_GPUS), dtype=int)
    for g in range(N_GPUS):
        for k, (_, _, want) in enumerate(slots):
            overlap[g, k] = len(held[g] & want)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    best_stationary = int(overlap[rows, cols].sum())
    assignment = [0] * len(slots)
    for g, k in zip(rows, cols):
        if k < len(slots):
            assignment[k] = int(g)
    assignment = _improve(src, tps, slots, overlap, assignment)
    moves, t = transition_cost(src, assignment, tps)
    placed = _placement(tps, slots, assignment)
    stationary = sum(overlap[g, k] for k, g in enumerate(assignment))
    assert stationary == best_stationary
    per_pair = {}
    for a, b, _ in moves:
        per_pair[(a, b)] = per_pair.get((a, b), 0) + 1
    return ReshardPlan(
        src=src,
        dst=placed,
        transfers=tuple((a, b, n) for (a, b), n in sorted(per_pair.items())),
        shard_moves=tuple(sorted(moves)),
        parallel_time=t,
        stationary=int(stationary),
        downtime=downtime_class(src, placed, shard_bytes, gpu_mem_bytes),
        memory_peak=max(_resident(src, placed)),
    )


def _improve(src, tps, slots, overlap, assignment):
    """Pairwise swaps that keep stationary overlap and shorten transfer time.

    Swapping a slot with an unused GPU is included, so idle GPUs can take
    over a slot whenever that spreads the copies over more links.
    """
    assignment = list(assignment)
    _, best_t = transition_cost(src, assignment, tps)
    improved = True
    while improved and best_t > 0:
        improved = False
        free = [g for g in range(N_GPUS) if g not in assignment]
        for a in range(len(slots)):
            cands = [("slot", b) for b in range(a + 1, len(slots))] + [("gpu", g) for g in free]
            for kind, b in cands:
                trial = list(assignment)
                if kind == "slot":
                    trial[a], trial[b] = trial[b], trial[a]
                else:
                    trial[a] = b
                if sum(overlap[g, k] for k, g in enumerate(trial)) != sum(
                        overlap[g, k] for k, g in enumerate(assignment)):
                    continue
                _, t = transition_cost(src, trial, tps)
                if t < best_t:
                    assignment, best_t, improved = trial, t, True
                    break
            if improved:
                break
    return assignment


def _resident(src: Layout, dst: Layout) -> list[int]:
    """Shards on each GPU while old and new instances coexist."""
    old, new = src.shards(), dst.shards()
    return [len(o) if o == n else len(o) + len(n) for o, n in zip(old, new)]


def downtime_class(src: Layout, dst: Layout, model_shard_bytes: float = SHARD_BYTES_70B,
                   gpu_mem_bytes: float = GPU_MEM_BYTES) -> str:
    """How much serving suffers while ``src`` turns into ``dst``.

    The old instance keeps serving during the switch only if old and new
    weights fit side by side on every GPU.  Serving GPUs that end up holding
    more weights have less room for KV cache, so throughput drops.
    """
    if model_shard_bytes <= 0 or gpu_mem_bytes <= 0:
        raise ValueError("byte sizes must be positive")
    if isinstance(src, str):
        src = NAMED_LAYOUTS[src]
    if isinstance(dst, str):
        dst = plan(src, dst, model_shard_bytes, gpu_mem_bytes).dst
    if any(n * model_shard_bytes > gpu_mem_bytes for n in _resident(src, dst)):
        return FULL_STOP
    old, new = src.shards(), dst.shards()
    serving = src.owner()
    if any(serving[g] is not None and len(new[g]) > len(old[g]) for g in range(N_GPUS)):
        return REDUCED
    return NONE


def full_table() -> np.ndarray:
    """Parallel re-shard time in units of T, rows/columns in ``TABLE_ORDER``."""
    out = np.zeros((len(TABLE_ORDER), len(TABLE_ORDER)), dtype=int)
    for i, a in enumerate(TABLE_ORDER):
        for j, b in enumerate(TABLE_ORDER):
            out[i, j] = plan(NAMED_LAYOUTS[a], NAMED_LAYOUTS[b]).parallel_time
    return out
