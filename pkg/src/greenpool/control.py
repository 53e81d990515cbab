"""Three controller levels: cluster (pool sizing), pool (sharding), instance (frequency).

Controllers only read state and return action objects; the simulator applies
the actions in the order they are returned, so a run is a deterministic
function of the message order.
"""

from __future__ import annotations

import configparser
import math
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import optimizer, reshard
from .optimizer import FleetPlan, Group, OverheadTable
from .profiles import PoolView, ProfileTable
from .workload import CLASS_INDEX, CLASSES, CONVERSATION_MIX, LoadForecast

NODE_GPUS = 8
SERVING, REDUCED, DOWN, DRAINING = "serving", "reduced", "down", "draining"
MAX_LEVEL = 4


@dataclass
class ControllerConfig:
    cluster_epoch_s: float = 1800.0
    pool_epoch_s: float = 300.0
    instance_epoch_s: float = 5.0
    observe_s: float = 1.0              # EWMA, power and emergency sampling period
    ewma_tau_s: float = 5.0
    forecast_headroom: float = 1.1
    pool_headroom: float = 1.15
    freq_headroom: float = 1.2
    peak_window_s: float = 10.0         # forecast uses the peak of windows this long
    overload_threshold: float = 1.2     # pool backlog per serving instance, seconds
    queue_depth_s: float = 2.0          # backlog an instance absorbs before queueing
    emergency_k: int = 3
    squash_factor: float = 2.0
    reduced_rate: float = 0.5           # service rate while weights are being added
    pool_count: int = 9
    scale_instances: bool = True
    scale_shards: bool = True
    scale_freq: bool = True
    single_pool: bool = False

    def __post_init__(self):
        if min(self.cluster_epoch_s, self.pool_epoch_s, self.instance_epoch_s, self.observe_s) <= 0:
            raise ValueError("epoch lengths must be positive")
        if self.pool_count < 1:
            raise ValueError("pool_count must be >= 1")
        if self.emergency_k < 1:
            raise ValueError("emergency_k must be >= 1")

    @classmethod
    def from_file(cls, path, section: str = "controller") -> "ControllerConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_section(cp[section] if cp.has_section(section) else cp[cp.default_section])

    @classmethod
    def from_section(cls, s) -> "ControllerConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in s:
                continue
            if f.type in ("bool", bool):
                kw[f.name] = s.getboolean(f.name)
            elif f.type in ("int", int):
                kw[f.name] = s.getint(f.name)
            else:
                kw[f.name] = s.getfloat(f.name)
        unknown = set(s) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown controller keys: {', '.join(sorted(unknown))}")
        return cls(**kw)


# --- fast service tables -----------------------------------------------------

class ServiceModel:
    """Profile curves resampled on a utilization grid for every (class, tp, freq).

    ``u`` is load over SLO capacity.  A class at utilization ``u`` sees the
    profile latency at ``u * ML``; past the last finite grid value latency is
    held at that value and queueing in the simulator takes over.
    """

    def __init__(self, profile: ProfileTable, u_max: float = 2.0, du: float = 0.0025):
        self.profile = profile
        self.tps = tuple(profile.tps)
        self.freqs = tuple(profile.freqs)
        self.du = du
        self.ugrid = np.arange(0.0, u_max + du / 2, du)
        nc, nt, nf, nu = len(CLASSES), len(self.tps), len(self.freqs), len(self.ugrid)
        self.ml = np.zeros((nc, nt, nf))
        self.en = np.zeros((nc, nt, nf, nu))
        self.ttft = np.full((nc, nt, nf, nu), np.inf)
        self.tbt = np.full((nc, nt, nf, nu), np.inf)
        self.idle = np.array([profile.idle_energy(tp) for tp in self.tps])
        for c in profile.classes:
            ci = CLASS_INDEX[c]
            xs = profile.loads[c]
            for t, tp in enumerate(self.tps):
                for j, f in enumerate(self.freqs):
                    ml = profile.max_load(c, tp, f)
                    self.ml[ci, t, j] = ml
                    x = np.minimum(self.ugrid * ml, xs[-1])
                    self.en[ci, t, j] = np.interp(x, xs, profile.energy[c][t, j])
                    for arr, src in ((self.ttft, profile.ttft[c]), (self.tbt, profile.tbt[c])):
                        ys = src[t, j]
                        fin = np.isfinite(ys)
                        last = xs[fin][-1]
                        v = np.interp(np.minimum(x, last), xs[fin], ys[fin])
                        arr[ci, t, j] = v
        with np.errstate(divide="ignore"):
            self.inv_ml = np.where(self.ml > 0, 1.0 / np.maximum(self.ml, 1e-300), np.inf)
        self.window_s = profile.window_s
        self.to_watts = 3600.0 / profile.window_s
        self.tp_index = {tp: t for t, tp in enumerate(self.tps)}
        self.freq_index = {f: j for j, f in enumerate(self.freqs)}

    def _pos(self, u: float):
        x = min(max(u / self.du, 0.0), len(self.ugrid) - 1.000001)
        i = int(x)
        return i, x - i

    def utilization(self, loads: np.ndarray, t: int, j: int) -> float:
        nz = loads > 0
        if not nz.any():
            return 0.0
        return float(np.dot(loads[nz], self.inv_ml[nz, t, j]))

    def power_w(self, loads: np.ndarray, t: int, j: int) -> float:
        """Instance power at per-class loads (TPS) on parallelism index t, frequency index j."""
        idle = self.idle[t]
        nz = np.nonzero(loads > 0)[0]
        if len(nz) == 0:
            return idle * self.to_watts
        w = loads[nz] * self.inv_ml[nz, t, j]
        u = float(w.sum())
        if not math.isfinite(u):
            u = self.ugrid[-1]
            w = np.where(np.isfinite(w), w, u)
        i, a = self._pos(u)
        e = self.en[nz, t, j, i] * (1 - a) + self.en[nz, t, j, i + 1] * a
        return (idle + float(np.dot(w / u, e - idle))) * self.to_watts

    def latency(self, ci: int, u: float, t: int, j: int) -> tuple[float, float]:
        i, a = self._pos(u)
        tt = self.ttft[ci, t, j]
        tb = self.tbt[ci, t, j]
        return (float(tt[i] * (1 - a) + tt[i + 1] * a), float(tb[i] * (1 - a) + tb[i + 1] * a))

    def latencies(self, u: float, t: int, j: int) -> tuple[list, list]:
        """TTFT and TBT of every class at utilization ``u``."""
        i, a = self._pos(u)
        tt = self.ttft[:, t, j, i] * (1 - a) + self.ttft[:, t, j, i + 1] * a
        tb = self.tbt[:, t, j, i] * (1 - a) + self.tbt[:, t, j, i + 1] * a
        return tt.tolist(), tb.tolist()

    def choose_freq(self, loads: np.ndarray, t: int) -> tuple[int, bool]:
        """Least-power grid frequency keeping utilization <= 1; top frequency if none does."""
        best = None
        for j in range(len(self.freqs)):
            if self.utilization(loads, t, j) <= 1.0:
                p = self.power_w(loads, t, j)
                if best is None or p < best[0]:
                    best = (p, j)
        if best is None:
            return len(self.freqs) - 1, False
        return best[1], True


# --- state -------------------------------------------------------------------

@dataclass(eq=False)
class InstanceState:
    id: int
    tp: int
    freq: int
    node: "NodeState | None" = None
    queue: deque = field(default_factory=deque)  # request ids waiting for admission
    in_flight: int = 0
    backlog_s: float = 0.0
    loads: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES)))   # EWMA TPS per class
    acc_tokens: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES)))
    peak: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES)))    # max of ``loads`` since last epoch
    util: float = 0.0
    power_w: float = 0.0
    status: str = SERVING
    stall_until: float = 0.0
    emergency_level: int = 0
    grow: int = 0
    shrink: int = 0
    last_qlen: int = 0
    infeasible: bool = False
    rr: int = 0

    @property
    def serving(self) -> bool:
        return self.status in (SERVING, REDUCED)


@dataclass(eq=False)
class NodeState:
    id: int
    pool: int
    instances: list = field(default_factory=list)
    ready_at: float = 0.0
    draining: bool = False
    transition_until: float = -1.0
    pending: tuple | None = None   # (new tps, freq) applied when the transition ends
    transfer_until: float = -1.0   # weight copies draw link power until then
    transfer_w: float = 0.0

    @property
    def layout(self) -> tuple[int, ...]:
        return tuple(sorted((i.tp for i in self.instances), reverse=True))


@dataclass(eq=False)
class PoolState:
    index: int
    name: str
    classes: tuple[str, ...]
    nodes: list = field(default_factory=list)
    overflow_fraction: float = 0.0
    overflow_acc: float = 0.0
    holding: deque = field(default_factory=deque)
    target_layout: tuple[int, ...] = (8,)
    peak_loads: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASSES)))
    live: list | None = None     # cached serving instances, maintained by the simulator

    @property
    def instances(self) -> list:
        return [i for n in self.nodes for i in n.instances]

    def serving_instances(self, now: float) -> list:
        if self.live is not None:
            return self.live
        return [i for n in self.nodes if n.ready_at <= now and not n.draining
                for i in n.instances if i.serving]


@dataclass(eq=False)
class ClusterState:
    pools: list
    capacity_nodes: int
    class_pools: dict            # class -> list of pool indices (more than one when split)
    pending_vm_creations: list = field(default_factory=list)   # (ready_at, pool, count)
    rr: dict = field(default_factory=dict)

    @property
    def allocated_nodes(self) -> int:
        return sum(len(p.nodes) for p in self.pools)

    @property
    def free_gpu_budget(self) -> int:
        return (self.capacity_nodes - self.allocated_nodes) * NODE_GPUS


def pool_groups(pool_count: int, mix: dict | None = None, single: bool = False):
    """Class sets per pool in routing order.

    Fewer than 9 pools merge neighbours in (input, output) order; more than
    9 split the classes with the largest share of the mix into equal parts.
    """
    if single or pool_count == 1:
        return [tuple(CLASSES)]
    if pool_count <= len(CLASSES):
        return [tuple(str(c) for c in g) for g in np.array_split(np.array(CLASSES), pool_count)]
    mix = dict(CONVERSATION_MIX if mix is None else mix)
    parts = {c: 1 for c in CLASSES}
    order = sorted(CLASSES, key=lambda c: (-mix.get(c, 0.0), CLASSES.index(c)))
    k = 0
    while sum(parts.values()) < pool_count:
        parts[order[k % len(order)]] += 1
        k += 1
    return [(c,) for c in CLASSES for _ in range(parts[c])]


def make_cluster(groups, capacity_nodes: int) -> ClusterState:
    pools = []
    class_pools = {}
    for k, g in enumerate(groups):
        name = "+".join(g) if len(g) <= 3 else f"{g[0]}..{g[-1]}"
        if sum(1 for h in groups if h == g) > 1:
            name = f"{name}#{sum(1 for h in groups[:k] if h == g)}"
        pools.append(PoolState(k, name, tuple(g)))
        for c in g:
            class_pools.setdefault(c, []).append(k)
    return ClusterState(pools, capacity_nodes, class_pools)


# --- routing -----------------------------------------------------------------

def pool_overloaded(pool: PoolState, now: float, threshold: float) -> bool:
    live = pool.serving_instances(now)
    if not live:
        return True
    return sum(i.backlog_s for i in live) > threshold * len(live)


def route(cls: str, state: ClusterState, now: float, threshold: float = 1.2) -> int:
    """Pool index for a request of predicted class ``cls``.

    The class's own pool unless it forwards its overflow share or is
    overloaded; then the next pool in order, and so on.  The last pool
    keeps everything it receives.
    """
    options = state.class_pools[cls]
    if len(options) > 1:
        k = state.rr.get(cls, 0)
        state.rr[cls] = k + 1
        idx = options[k % len(options)]
    else:
        idx = options[0]
    last = len(state.pools) - 1
    while idx < last:
        pool = state.pools[idx]
        if pool.overflow_fraction > 0:
            pool.overflow_acc += pool.overflow_fraction
            if pool.overflow_acc >= 1.0 - 1e-12:
                pool.overflow_acc -= 1.0
                idx += 1
                continue
        if pool_overloaded(pool, now, threshold):
            idx += 1
            continue
        break
    return idx


def pick_instance(pool: PoolState, now: float) -> InstanceState | None:
    best, key = None, None
    for inst in pool.serving_instances(now):
        k = (inst.backlog_s, inst.rr, inst.id)
        if key is None or k < key:
            best, key = inst, k
    if best is not None:
        best.rr += 1
    return best


# --- cluster epoch -----------------------------------------------------------

@dataclass(frozen=True)
class ScaleAction:
    pool: int
    nodes: int                  # target node count
    overflow_fraction: float


@dataclass(frozen=True)
class ClusterPlan:
    actions: tuple[ScaleAction, ...]
    saturated: bool
    residual_units: float       # node-units of forecast load left unserved


def pool_capacity(profile: ProfileTable, loads: dict, classes: Sequence[str]) -> float:
    """TPS one TP8 node at top frequency sustains for the pool's class mix."""
    mix = {c: v for c, v in loads.items() if v > 0}
    if not mix:
        mix = {c: 1.0 for c in classes}
    return PoolView(profile, mix).capacity(8, profile.max_freq)


def cluster_epoch(state: ClusterState, forecast: LoadForecast, profile: ProfileTable,
                  confusion: np.ndarray | None = None) -> ClusterPlan:
    """Nodes per pool from the forecast, with the fragmentation rule.

    ``confusion[i, j]`` is the fraction of true class ``i`` the router sends
    as class ``j``; pools are then sized for the true work they will
    receive.  Without it every request is assumed to land in its own pool.

    Each pool but the last gets one node fewer than it needs (not below
    zero); the load this leaves out moves, measured in node-units, to the
    next pool.  The last pool is sized for its own load plus what it
    receives and keeps at least one node.
    """
    pools = state.pools
    share = {c: 1.0 / len(state.class_pools[c]) for c in CLASSES}
    carried = 0.0
    actions = []
    for k, pool in enumerate(pools):
        if confusion is None:
            loads = {c: forecast[c] * share[c] for c in pool.classes}
        else:
            cols = [CLASS_INDEX[c] for c in pool.classes]
            loads = {}
            for i, c in enumerate(CLASSES):
                frac = sum(confusion[i, j] * share[CLASSES[j]] for j in cols)
                if frac > 0:
                    loads[c] = forecast[c] * frac
        cap = pool_capacity(profile, loads, pool.classes)
        own = sum(loads.values()) / cap
        need = own + carried
        last = k == len(pools) - 1
        if last:
            nodes = max(1, math.ceil(need - 1e-9))
            residual = 0.0
        else:
            nodes = max(0, math.ceil(need - 1e-9) - 1)
            residual = max(0.0, need - nodes)
        frac = residual / need if need > 0 else (1.0 if nodes == 0 else 0.0)
        if nodes == 0:
            frac = 1.0
        actions.append([k, nodes, min(frac, 1.0)])
        carried = residual
    total = sum(a[1] for a in actions)
    saturated = total > state.capacity_nodes
    residual = 0.0
    while sum(a[1] for a in actions) > state.capacity_nodes:
        victim = max(actions, key=lambda a: (a[1] - (1 if a[0] == len(actions) - 1 else 0), a[0]))
        victim[1] -= 1
        residual += 1.0
    return ClusterPlan(tuple(ScaleAction(k, n, f) for k, n, f in actions), saturated, residual)


# --- pool epoch --------------------------------------------------------------

@dataclass(frozen=True)
class ReshardAction:
    pool: int
    node: int
    layout: tuple[int, ...]
    freqs: tuple[int, ...]
    benefit_wh: float
    seconds: float
    downtime: str


def node_plan(view: PoolView, layout: Sequence[int], node_load: float, freq_knob: bool,
              model: ServiceModel | None = None) -> FleetPlan | None:
    """Plan for a fixed node layout, load shared in proportion to capacity."""
    prof = view.table
    top = prof.max_freq
    caps = [view.capacity(tp, top) for tp in layout]
    total = sum(caps)
    groups = []
    for tp in sorted(set(layout)):
        n = sum(1 for x in layout if x == tp)
        load = node_load * view.capacity(tp, top) / total if total > 0 else math.inf
        if not view.feasible(load, tp, top):
            return None
        f = optimizer.select_frequency(prof, view, load, tp).freq if freq_knob else top
        groups.append(Group(tp, n, f, load, view.energy(load, tp, f)))
    return FleetPlan(tuple(groups), prof.window_s, prof.idle_power_w)


def pool_epoch(pool: PoolState, loads: np.ndarray, profile: ProfileTable, overheads: OverheadTable,
               config: ControllerConfig, now: float) -> list[ReshardAction]:
    """Re-shard nodes toward the cheapest layout for the observed pool load.

    Every node gets the same target since load is spread evenly.  A node
    changes only when the energy saved over one pool epoch beats the
    transition cost, and at most half the nodes (rounded up) change per
    epoch, so part of the pool keeps serving.
    """
    nodes = [n for n in pool.nodes if n.ready_at <= now and not n.draining and n.pending is None]
    live = [n for n in pool.nodes if n.ready_at <= now and not n.draining]
    if not nodes:
        return []
    total = float(loads.sum()) * config.pool_headroom
    if total <= 0:
        mix = {c: 1.0 for c in pool.classes}
    else:
        mix = {CLASSES[k]: float(v) for k, v in enumerate(loads) if v > 0}
    view = PoolView(profile, mix)
    node_load = total / len(live)
    target = optimizer.solve_shards(profile, view, node_load, NODE_GPUS, idle_unused=True)
    if not target:
        return []
    layout = tuple(sorted(target.instance_tps, reverse=True)) or (8,)
    pool.target_layout = layout
    cand = node_plan(view, layout, node_load, config.scale_freq)
    if cand is None:
        return []
    idle_gpu_w = profile.idle_power_w
    actions = []
    for node in nodes:
        if node.layout == layout:
            continue
        cur = node_plan(view, node.layout, node_load, config.scale_freq)
        rp = reshard.plan(reshard.Layout.from_mix(node.layout), layout)
        if cur is None:
            gain = math.inf
        else:
            spare = (cand.gpus - cur.gpus) * idle_gpu_w * config.pool_epoch_s / 3600.0
            gain = optimizer.net_benefit(cur, cand, overheads, config.pool_epoch_s, rp) + spare
        if gain <= 0:
            continue
        secs = rp.parallel_time * overheads.t_ms / 1000.0 + overheads.sync_s
        freqs = tuple(next(g.freq for g in cand.groups if g.tp == tp) for tp in layout)
        actions.append(ReshardAction(pool.index, node.id, layout, freqs, gain, secs, rp.downtime))
    actions.sort(key=lambda a: (-a.benefit_wh, a.node))
    # stagger: at most half the nodes change, and at least half the instances keep serving
    busy = [n for n in live if n.pending is not None]
    limit = math.ceil(len(live) / 2) - len(busy)
    n_inst = sum(len(n.instances) for n in live)
    down = sum(1 for n in busy for i in n.instances if i.status == DOWN)
    down_budget = n_inst // 2
    chosen = []
    by_id = {n.id: n for n in nodes}
    for a in actions:
        if len(chosen) >= limit:
            break
        if a.downtime == reshard.FULL_STOP:
            k = len(by_id[a.node].instances)
            if down + k > down_budget:
                continue
            down += k
        chosen.append(a)
    return chosen


# --- instance epoch and emergencies ---------------------------------------------

@dataclass(frozen=True)
class FreqAction:
    instance: int
    freq: int
    feasible: bool


def instance_epoch(inst: InstanceState, model: ServiceModel, headroom: float = 1.2,
                   backlog_limit_s: float = 1.0) -> FreqAction | None:
    """Pick the cheapest frequency that carries the recent peak load with headroom.

    The load is the peak of the smoothed per-class rate since the last epoch.  An instance with queued requests or more than
    ``backlog_limit_s`` of unfinished work never clocks down.
    """
    t = model.tp_index[inst.tp]
    demand = np.maximum(inst.loads, inst.peak)
    inst.peak = np.zeros_like(inst.peak)
    j, ok = model.choose_freq(demand * headroom, t)
    freq = model.freqs[j]
    if not ok:
        return FreqAction(inst.id, model.freqs[-1], False)
    if inst.emergency_level >= 2 or freq == inst.freq:
        return None
    if freq < inst.freq and (inst.queue or inst.backlog_s > backlog_limit_s):
        return None
    return FreqAction(inst.id, freq, True)


@dataclass(frozen=True)
class EmergencyAction:
    instance: int
    level: int
    kind: str       # "reorder", "max_freq", "resteer", "squash", "relax", "none"


LADDER = ("none", "reorder", "max_freq", "resteer", "squash")


def emergency_step(inst: InstanceState, k: int = 3) -> EmergencyAction:
    """Feed one queue-length observation to the ladder; move at most one level."""
    qlen = len(inst.queue)
    if qlen > inst.last_qlen:
        inst.grow += 1
        inst.shrink = 0
    elif qlen < inst.last_qlen or qlen == 0:
        inst.shrink += 1
        inst.grow = 0
    inst.last_qlen = qlen
    if inst.grow >= k and inst.emergency_level < MAX_LEVEL:
        inst.grow = 0
        inst.emergency_level += 1
        return EmergencyAction(inst.id, inst.emergency_level, LADDER[inst.emergency_level])
    if inst.shrink >= k and inst.emergency_level > 0:
        inst.shrink = 0
        inst.emergency_level -= 1
        return EmergencyAction(inst.id, inst.emergency_level, "relax")
    if inst.emergency_level == MAX_LEVEL:
        return EmergencyAction(inst.id, MAX_LEVEL, "squash")
    return EmergencyAction(inst.id, inst.emergency_level, "none")


def escalate(inst: InstanceState) -> EmergencyAction:
    """Climb one rung of the ladder regardless of the queue trend."""
    if inst.emergency_level < MAX_LEVEL:
        inst.emergency_level += 1
    inst.grow = inst.shrink = 0
    return EmergencyAction(inst.id, inst.emergency_level, LADDER[inst.emergency_level])
