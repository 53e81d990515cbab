"""Energy-minimal fleet configuration for one request class.

A fleet is a set of tensor-parallel groups.  All instances of a group share
one frequency and an equal slice of the load.  The load is split between
groups in ``SPLIT_UNITS`` equal parts, so a plan is fully described by the
instance count, frequency, and number of parts per parallelism.

``solve_exact`` searches counts, splits and frequencies exhaustively.
``solve_shards`` is the same search pinned to the top frequency, and
``select_frequency`` then tunes one instance; together they form the cheap
two-step pipeline the controllers use.
"""

from __future__ import annotations

import configparser
import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from . import reshard
from .profiles import PoolView, ProfileTable
from .workload import SloTable

SPLIT_UNITS = 10
MAX_GPUS = 64
TRANSFER_POWER_W = 100.0
DOWNTIME_FACTOR = {reshard.NONE: 0.0, reshard.REDUCED: 0.5, reshard.FULL_STOP: 1.0}


def _view(profile, cls, slo) -> PoolView:
    if isinstance(cls, PoolView):
        return cls
    return PoolView(profile, cls, slo)


def share_load(total: float, parts: int, count: int, units: int = SPLIT_UNITS) -> float:
    """Per-instance load when ``count`` instances take ``parts`` of ``units`` shares."""
    return total * parts / (units * count)


@dataclass(frozen=True)
class Group:
    tp: int
    count: int
    freq: int
    load: float      # TPS per instance
    energy: float    # Wh per profile window, per instance

    @property
    def gpus(self) -> int:
        return self.tp * self.count


@dataclass(frozen=True)
class FleetPlan:
    groups: tuple[Group, ...]   # count > 0, ascending tp
    window_s: float = 6.0
    idle_power_w: float = 80.0

    feasible = True

    @property
    def energy(self) -> float:
        e = 0.0
        for g in self.groups:
            e += g.count * g.energy
        return e

    @property
    def gpus(self) -> int:
        return sum(g.gpus for g in self.groups)

    @property
    def total_load(self) -> float:
        return sum(g.count * g.load for g in self.groups)

    @property
    def power_w(self) -> float:
        return self.energy * 3600.0 / self.window_s

    @property
    def instance_tps(self) -> tuple[int, ...]:
        return tuple(g.tp for g in self.groups for _ in range(g.count))

    def group(self, tp: int) -> Group | None:
        for g in self.groups:
            if g.tp == tp:
                return g
        return None

    def key(self) -> tuple:
        freqs = [g.freq for g in self.groups]
        return (self.energy, self.gpus, max(freqs, default=0), sum(freqs))

    def __bool__(self) -> bool:
        return True


@dataclass(frozen=True)
class Infeasible:
    """No plan covers ``requested`` within the GPU budget; ``max_load`` is the best reachable."""

    requested: float
    max_load: float
    gpus: int

    feasible = False
    energy = math.inf

    def __bool__(self) -> bool:
        return False


def _group_options(view: PoolView, total: float, budget: int, freqs: Sequence[int],
                   tps: Sequence[int], units: int):
    """Cheapest frequency for every (tp, count, parts), or nothing if none is feasible."""
    table = {}
    for tp in tps:
        for n in range(1, budget // tp + 1):
            for k in range(1, units + 1):
                load = share_load(total, k, n, units)
                best = None
                for f in freqs:
                    if not view.feasible(load, tp, f):
                        continue
                    e = view.energy(load, tp, f)
                    if best is None or e < best[0]:
                        best = (e, f)
                if best is not None:
                    table[(tp, n, k)] = (best[0], best[1], load)
    return table


def _splits(groups: int, units: int):
    """All ways to give each of ``groups`` groups at least one of ``units`` parts."""
    if groups == 0:
        return
    for cuts in itertools.combinations(range(1, units), groups - 1):
        edges = (0,) + cuts + (units,)
        yield tuple(edges[i + 1] - edges[i] for i in range(groups))


def _count_vectors(tps: Sequence[int], budget: int):
    def rec(i, left):
        if i == len(tps):
            yield ()
            return
        for n in range(left // tps[i] + 1):
            for rest in rec(i + 1, left - n * tps[i]):
                yield (n,) + rest
    yield from rec(0, budget)


def max_coverable(view: PoolView, budget: int, tps: Sequence[int], freq: int) -> float:
    best = 0.0
    for counts in _count_vectors(tps, budget):
        best = max(best, sum(n * view.capacity(tp, freq) for tp, n in zip(tps, counts)))
    return best


def _search(view: PoolView, total: float, budget: int, freqs: Sequence[int],
            units: int, window_s: float, idle_unused: bool):
    tps = tuple(sorted(view.table.tps))
    if total < 0:
        raise ValueError("negative load")
    if budget < 0:
        raise ValueError("negative GPU budget")
    idle_w = view.table.idle_power_w
    if total == 0:
        return FleetPlan((), window_s, idle_w)
    options = _group_options(view, total, budget, freqs, tps, units)
    idle_gpu = view.table.idle_energy(1)
    best, best_key = None, None
    for counts in _count_vectors(tps, budget):
        used = [(tp, n) for tp, n in zip(tps, counts) if n > 0]
        if not used:
            continue
        spare = budget - sum(tp * n for tp, n in used)
        for parts in _splits(len(used), units):
            picks = []
            for (tp, n), k in zip(used, parts):
                opt = options.get((tp, n, k))
                if opt is None:
                    break
                picks.append(Group(tp, n, opt[1], opt[2], opt[0]))
            else:
                plan = FleetPlan(tuple(picks), window_s, idle_w)
                key = plan.key()
                if idle_unused:
                    key = (key[0] + spare * idle_gpu,) + key[1:]
                if best_key is None or key < best_key:
                    best, best_key = plan, key
    if best is None:
        return Infeasible(total, max_coverable(view, budget, tps, max(freqs)), budget)
    return best


def solve_exact(profile: ProfileTable, cls, load: float, gpus: int, slo: SloTable | None = None,
                units: int = SPLIT_UNITS, idle_unused: bool = False):
    """Minimum-energy plan over counts, load splits and grid frequencies.

    Ties go to fewer GPUs, then lower peak frequency, then lower total
    frequency.  With ``idle_unused`` the budget GPUs left unused are charged
    idle energy, which is what a pool that keeps its nodes pays.
    """
    if gpus > MAX_GPUS:
        raise ValueError(f"enumeration is limited to {MAX_GPUS} GPUs, got {gpus}")
    view = _view(profile, cls, slo)
    return _search(view, load, gpus, profile.freqs, units, profile.window_s, idle_unused)


def solve_shards(profile: ProfileTable, cls, load: float, gpus: int, slo: SloTable | None = None,
                 units: int = SPLIT_UNITS, idle_unused: bool = False):
    """As ``solve_exact`` with every instance at the highest frequency."""
    if gpus > MAX_GPUS:
        raise ValueError(f"enumeration is limited to {MAX_GPUS} GPUs, got {gpus}")
    view = _view(profile, cls, slo)
    return _search(view, load, gpus, (profile.max_freq,), units, profile.window_s, idle_unused)


class FreqChoice(NamedTuple):
    freq: int
    feasible: bool
    energy: float


def select_frequency(profile: ProfileTable, cls, load: float, tp: int,
                     slo: SloTable | None = None) -> FreqChoice:
    """Cheapest SLO-feasible grid frequency, or the top frequency flagged infeasible."""
    view = _view(profile, cls, slo)
    best = None
    for f in profile.freqs:
        if view.feasible(load, tp, f):
            e = view.energy(load, tp, f)
            if best is None or e < best.energy:
                best = FreqChoice(f, True, e)
    if best is None:
        top = profile.max_freq
        return FreqChoice(top, False, view.energy(min(load, _top_load(view)), tp, top))
    return best


def _top_load(view: PoolView) -> float:
    return min(view.table.loads[c][-1] for c in view.mix)


def hierarchical(profile: ProfileTable, cls, load: float, gpus: int, slo: SloTable | None = None,
                 units: int = SPLIT_UNITS):
    """Shard at the top frequency, then tune each group's frequency on its own."""
    plan = solve_shards(profile, cls, load, gpus, slo, units)
    if not plan:
        return plan
    groups = []
    for g in plan.groups:
        choice = select_frequency(profile, cls, g.load, g.tp, slo)
        groups.append(Group(g.tp, g.count, choice.freq, g.load, choice.energy))
    return FleetPlan(tuple(groups), plan.window_s, plan.idle_power_w)


def best_config(profile: ProfileTable, cls, load: float, slo: SloTable | None = None):
    """Single-instance (tp, freq, energy) with the least energy at ``load``, or None."""
    view = _view(profile, cls, slo)
    best = None
    for tp in sorted(profile.tps):
        for f in profile.freqs:
            if view.feasible(load, tp, f):
                cand = (view.energy(load, tp, f), tp, f)
                if best is None or cand < best:
                    best = cand
    return None if best is None else (best[1], best[2], best[0])


def check_plan(plan: FleetPlan, profile: ProfileTable, cls, load: float, gpus: int,
               slo: SloTable | None = None, rel: float = 1e-9) -> None:
    """Raise AssertionError unless the plan meets budget, coverage and SLOs."""
    view = _view(profile, cls, slo)
    assert plan.gpus <= gpus, f"plan uses {plan.gpus} GPUs, budget {gpus}"
    assert plan.total_load >= load * (1 - rel), f"plan covers {plan.total_load} < {load}"
    for g in plan.groups:
        assert view.feasible(g.load, g.tp, g.freq), f"TP{g.tp}@{g.freq} infeasible at {g.load}"


# --- reconfiguration overheads -------------------------------------------

@dataclass(frozen=True)
class OverheadTable:
    scale_out_s: float = 420.0
    t_ms: float = 50.0              # time to move one 1/8 shard
    freq_switch_ms: float = 65.0
    sync_s: float = 1.0             # engine re-sync after a re-shard
    transfer_power_w: float = TRANSFER_POWER_W   # per GPU pair while copying

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"overhead {k} must be >= 0")

    def reshard(self, src, dst) -> tuple[float, str]:
        """Transfer seconds and downtime class for a node-level layout change."""
        p = reshard.plan(src, dst)
        return p.parallel_time * self.t_ms / 1000.0, p.downtime

    @classmethod
    def from_file(cls, path) -> "OverheadTable":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        s = cp["overheads"] if cp.has_section("overheads") else cp[cp.default_section]
        d = cls()
        return cls(**{k: s.getfloat(k, getattr(d, k)) for k in d.__dict__})


@dataclass(frozen=True)
class TransitionCost:
    energy_wh: float        # spent on the transition itself
    penalty_wh: float       # lost or degraded service, in energy terms
    seconds: float
    downtime: str


def transition_cost(current: FleetPlan, candidate: FleetPlan,
                    overheads: OverheadTable = OverheadTable(),
                    rp: reshard.ReshardPlan | None = None) -> TransitionCost:
    """Overhead of moving from ``current`` to ``candidate`` on one node."""
    if current.instance_tps == candidate.instance_tps:
        stalled = 0.0
        for g in candidate.groups:
            old = current.group(g.tp)
            if old is not None and old.freq != g.freq:
                stalled += g.count * g.energy * 3600.0 / current.window_s
        secs = overheads.freq_switch_ms / 1000.0
        return TransitionCost(0.0, stalled * secs / 3600.0, secs if stalled else 0.0, reshard.NONE)
    if rp is None:
        if current.gpus > reshard.N_GPUS or candidate.gpus > reshard.N_GPUS:
            raise ValueError("pass an explicit re-shard plan for multi-node transitions")
        src = reshard.Layout.from_mix(current.instance_tps)
        rp = reshard.plan(src, candidate.instance_tps)
    transfer_s = rp.parallel_time * overheads.t_ms / 1000.0
    pairs = len(rp.transfers)
    energy = transfer_s * overheads.transfer_power_w * pairs
    old, new = rp.src.shards(), rp.dst.shards()
    affected = sum(1 for a, b in zip(old, new) if a != b and a)
    active_per_gpu = current.power_w / current.gpus if current.gpus else 0.0
    down_s = transfer_s + overheads.sync_s
    if rp.downtime == reshard.FULL_STOP:
        # new instance sits loaded but idle until the old one is gone
        energy += down_s * current.idle_power_w * candidate.gpus
    penalty = DOWNTIME_FACTOR[rp.downtime] * down_s * active_per_gpu * affected
    return TransitionCost(energy / 3600.0, penalty / 3600.0, down_s, rp.downtime)


def net_benefit(current: FleetPlan, candidate: FleetPlan, overheads: OverheadTable = OverheadTable(),
                horizon: float = 300.0, rp: reshard.ReshardPlan | None = None) -> float:
    """Energy saved over ``horizon`` seconds minus the cost of switching, in Wh."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if current == candidate:
        return 0.0
    saving = (current.power_w - candidate.power_w) * horizon / 3600.0
    cost = transition_cost(current, candidate, overheads, rp)
    return saving - cost.energy_wh - cost.penalty_wh
