"""Discrete-time cluster simulator with energy, latency, carbon and cost accounting.

Each instance keeps a backlog measured in seconds of its own capacity: a
request adds ``input_tokens / ML`` for its class at the instance's current
(tp, freq), and the backlog drains at one second per second while the
instance serves.  Requests are admitted while the backlog is under
``queue_depth_s`` and wait in the instance queue otherwise.  An admitted
request gets the profile TTFT/TBT of its class at the instance's smoothed
utilization, plus any time it waited.  Instance power follows the
profile energy at the smoothed per-class load.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import reshard
from .control import (
    DOWN, NODE_GPUS, REDUCED, SERVING, ClusterState, ControllerConfig, InstanceState, NodeState,
    ServiceModel, cluster_epoch, emergency_step, escalate, instance_epoch, make_cluster,
    pick_instance, pool_epoch, pool_groups, route,
)
from .optimizer import OverheadTable
from .profiles import ProfileTable, load_profile
from .workload import (
    CLASS_INDEX, CLASSES, DEFAULT_SLO, LoadForecast, Request, SloTable, load_series,
    predict_output_length,
)

POLICIES = ("SinglePool", "MultiPool", "ScaleInst", "ScaleShard", "ScaleFreq", "AllKnobs")

PENDING, ADMITTED, DONE, SQUASHED = 0, 1, 2, 3


def baseline(policy: str, config: ControllerConfig | None = None) -> ControllerConfig:
    """Controller wiring for a named policy."""
    base = ControllerConfig() if config is None else config
    knobs = {
        "SinglePool": dict(single_pool=True, scale_instances=False, scale_shards=False, scale_freq=False),
        "MultiPool": dict(single_pool=False, scale_instances=False, scale_shards=False, scale_freq=False),
        "ScaleInst": dict(single_pool=False, scale_instances=True, scale_shards=False, scale_freq=False),
        "ScaleShard": dict(single_pool=False, scale_instances=False, scale_shards=True, scale_freq=False),
        "ScaleFreq": dict(single_pool=False, scale_instances=False, scale_shards=False, scale_freq=True),
        "AllKnobs": dict(single_pool=False, scale_instances=True, scale_shards=True, scale_freq=True),
    }
    if policy not in knobs:
        raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    return replace(base, **knobs[policy])


@dataclass
class SimConfig:
    policy: str = "AllKnobs"
    tick_ms: float = 100.0
    cluster_nodes: int = 64
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    overheads: OverheadTable = field(default_factory=OverheadTable)
    slo: SloTable = DEFAULT_SLO
    duration_s: float | None = None     # defaults to the trace length, rounded up to a second
    error_rate: float = 0.0
    provision_scale: float = 1.0        # static policies provision for this multiple of the trace peak
    gpu_price_hr: float = 2.5
    energy_price_kwh: float = 0.12
    seed: int = 0

    def validate(self) -> None:
        c = self.controller
        smallest = min(c.cluster_epoch_s, c.pool_epoch_s, c.instance_epoch_s)
        if self.tick_ms <= 0 or self.tick_ms / 1000.0 > smallest / 10 + 1e-12:
            raise ValueError(f"tick {self.tick_ms} ms must be positive and <= 1/10 of the "
                             f"shortest epoch ({smallest} s)")
        if self.cluster_nodes < 1:
            raise ValueError("cluster_nodes must be >= 1")
        if not 0 <= self.error_rate <= 1:
            raise ValueError("error_rate must lie in [0, 1]")
        if self.provision_scale <= 0:
            raise ValueError("provision_scale must be positive")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        steps = c.observe_s * 1000.0 / self.tick_ms
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("observe_s must be a whole number of ticks")


@dataclass
class SimReport:
    policy: str
    tick_s: float
    time_s: np.ndarray
    power_w: np.ndarray
    gpus: np.ndarray            # GPUs allocated (ready or booting)
    energy_wh: np.ndarray       # cumulative
    request_class: np.ndarray   # index into CLASSES, true class
    predicted_class: np.ndarray
    pool: np.ndarray
    ttft_ms: np.ndarray         # nan unless admitted
    tbt_ms: np.ndarray
    status: np.ndarray
    ttft_slo_ms: np.ndarray
    tbt_slo_ms: np.ndarray
    energy_by_class_wh: dict
    counters: dict
    pool_names: list

    @property
    def total_energy_wh(self) -> float:
        return float(self.energy_wh[-1]) if len(self.energy_wh) else 0.0

    @property
    def gpu_hours(self) -> float:
        return float(self.gpus.sum() * self.tick_s / 3600.0)

    @property
    def squashed(self) -> int:
        return int((self.status == SQUASHED).sum())

    def latency_stats(self) -> dict:
        out = {}
        served = self.status >= ADMITTED
        served &= self.status != SQUASHED
        for k, c in enumerate(CLASSES):
            m = served & (self.request_class == k)
            if not m.any():
                out[c] = dict(count=0)
                continue
            tt, tb = self.ttft_ms[m], self.tbt_ms[m]
            out[c] = dict(
                count=int(m.sum()),
                p50_ttft_ms=float(np.percentile(tt, 50)), p99_ttft_ms=float(np.percentile(tt, 99)),
                p50_tbt_ms=float(np.percentile(tb, 50)), p99_tbt_ms=float(np.percentile(tb, 99)),
            )
        return out

    def violation_rate(self) -> float:
        served = (self.status == ADMITTED) | (self.status == DONE)
        n = int(served.sum()) + self.squashed
        if n == 0:
            return 0.0
        bad = served & ((self.ttft_ms > self.ttft_slo_ms) | (self.tbt_ms > self.tbt_slo_ms))
        return float((bad.sum() + self.squashed) / n)

    def summary(self) -> dict:
        st = self.status
        return dict(
            policy=self.policy,
            duration_s=float(len(self.time_s) * self.tick_s),
            energy_wh=self.total_energy_wh,
            mean_power_w=float(self.power_w.mean()) if len(self.power_w) else 0.0,
            gpu_hours=self.gpu_hours,
            mean_nodes=float(self.gpus.mean() / NODE_GPUS) if len(self.gpus) else 0.0,
            requests=dict(arrived=int(len(st)), completed=int((st == DONE).sum()),
                          squashed=self.squashed,
                          in_flight=int(((st == ADMITTED) | (st == PENDING)).sum())),
            slo_violation_rate=self.violation_rate(),
            latency=self.latency_stats(),
            energy_by_class_wh=self.energy_by_class_wh,
            counters=self.counters,
            pools=self.pool_names,
        )

    def write(self, out_dir, carbon_kg: float | None = None, cost_usd: dict | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summ = self.summary()
        if carbon_kg is not None:
            summ["carbon_kg"] = carbon_kg
        if cost_usd is not None:
            summ["cost_usd"] = cost_usd
        (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
        with open(out / "timeseries.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("time_s", "power_w", "gpus", "power_per_gpu_w", "energy_wh"))
            for t, p, g, e in zip(self.time_s, self.power_w, self.gpus, self.energy_wh):
                w.writerow((f"{t:.3f}", f"{p:.6f}", int(g), f"{p / g if g else 0.0:.6f}", f"{e:.6f}"))
        names = ("pending", "admitted", "completed", "squashed")
        with open(out / "requests.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id", "class", "predicted_class", "pool", "ttft_ms", "tbt_ms", "status"))
            for k in range(len(self.status)):
                w.writerow((k, CLASSES[self.request_class[k]], CLASSES[self.predicted_class[k]],
                            int(self.pool[k]), f"{self.ttft_ms[k]:.3f}", f"{self.tbt_ms[k]:.3f}",
                            names[self.status[k]]))
        return out


# --- carbon and cost -----------------------------------------------------------

@dataclass(frozen=True)
class CarbonTrace:
    time_s: np.ndarray
    g_per_kwh: np.ndarray

    def __post_init__(self):
        if len(self.time_s) == 0 or len(self.time_s) != len(self.g_per_kwh):
            raise ValueError("carbon trace needs matching, non-empty columns")
        if np.any(np.diff(self.time_s) <= 0):
            raise ValueError("carbon trace timestamps must increase")
        if np.any(self.g_per_kwh < 0):
            raise ValueError("carbon intensity must be >= 0")

    @classmethod
    def constant(cls, g_per_kwh: float, duration_s: float) -> "CarbonTrace":
        return cls(np.array([0.0, float(duration_s)]), np.array([g_per_kwh, g_per_kwh], float))

    @classmethod
    def from_csv(cls, path) -> "CarbonTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["timestamp_s", "g_co2_per_kwh"]:
                raise ValueError(f"{path}: expected header timestamp_s,g_co2_per_kwh")
            rows = [(float(a), float(b)) for a, b in reader if a.strip()]
        arr = np.array(rows, float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])


def carbon(report: SimReport, trace: CarbonTrace) -> tuple[np.ndarray, float]:
    """Per-tick kg CO2 and their total, intensity interpolated at tick midpoints."""
    mid = report.time_s + report.tick_s / 2
    end = len(report.time_s) * report.tick_s
    eps = 1e-9 * max(1.0, end)
    if len(mid) and (trace.time_s[0] > report.time_s[0] + eps or trace.time_s[-1] < end - eps):
        raise ValueError(f"carbon trace covers [{trace.time_s[0]}, {trace.time_s[-1]}] s, "
                         f"simulation spans [0, {end}] s")
    intensity = np.interp(mid, trace.time_s, trace.g_per_kwh)
    kwh = report.power_w * report.tick_s / 3.6e6
    kg = kwh * intensity / 1000.0
    return kg, float(kg.sum())


def cost(report: SimReport, gpu_price_hr: float, energy_price_kwh: float) -> dict:
    gpu = report.gpu_hours * gpu_price_hr
    energy = report.total_energy_wh / 1000.0 * energy_price_kwh
    return dict(gpu=gpu, energy=energy, total=gpu + energy)


# --- engine --------------------------------------------------------------------

class Simulator:
    def __init__(self, config: SimConfig, requests: Sequence[Request], profile: ProfileTable,
                 model: ServiceModel | None = None):
        config.validate()
        self.cfg = config
        self.ctl = baseline(config.policy, config.controller)
        self.profile = profile
        self.model = model or ServiceModel(profile)
        self.slo = config.slo
        self.tick = config.tick_ms / 1000.0
        self.requests = list(requests)
        n = len(self.requests)
        self.arrival = np.array([r.arrival / 1000.0 for r in self.requests], float)
        if n and np.any(np.diff(self.arrival) < 0):
            raise ValueError("requests must be sorted by arrival")
        self.inp = np.array([r.input_tokens for r in self.requests], float)
        self.out = np.array([r.output_tokens for r in self.requests], int)
        self.cls = np.array([CLASS_INDEX[self.slo.input_bucket(r.input_tokens) +
                                         self.slo.output_bucket(r.output_tokens)]
                             for r in self.requests], int)
        rng = np.random.default_rng(config.seed)
        self.pred = np.array([CLASS_INDEX[self.slo.input_bucket(r.input_tokens) +
                                          predict_output_length(r, config.error_rate, rng, self.slo)]
                              for r in self.requests], int)
        self.ttft_slo = np.array([self.slo.ttft_slo(CLASSES[c], r.service_slo_multiplier)
                                  for c, r in zip(self.cls, self.requests)], float)
        self.tbt_slo = np.array([self.slo.tbt_slo(CLASSES[c], r.service_slo_multiplier)
                                 for c, r in zip(self.cls, self.requests)], float)
        self.ttft = np.full(n, np.nan)
        self.tbt = np.full(n, np.nan)
        self.status = np.zeros(n, np.int8)
        self.pool_of = np.full(n, -1, int)
        if config.duration_s is not None:
            self.duration = float(config.duration_s)
        else:
            self.duration = float(math.ceil(self.arrival[-1] + 1e-9)) if n else 1.0
        self.n_ticks = int(round(self.duration / self.tick))
        self.counters = dict(reshards=0, freq_changes=0, nodes_created=0, nodes_removed=0,
                             emergencies=0, resteered=0, squashed=0, infeasible_freq=0)
        self.energy_by_class = np.zeros(len(CLASSES))
        self.heap = []
        self._lat = {}
        self._next_instance = 0
        self._next_node = 0
        self.now = 0.0
        self.min_serving_share = 1.0     # lowest serving fraction of a pool right after a re-shard epoch
        self._build_cluster()

    # --- setup ---------------------------------------------------------------

    def _forecasts(self):
        c = self.ctl
        slot = c.cluster_epoch_s
        n_slots = max(1, int(math.ceil(self.duration / slot - 1e-9)))
        classes = [CLASSES[k] for k in self.cls]
        if self.requests:
            series = load_series(self.requests, slot, n_slots, classes,
                                 peak_window_s=min(c.peak_window_s, slot), slo=self.slo)
        else:
            series = np.zeros((n_slots, len(CLASSES)))
        return series * c.forecast_headroom

    def _confusion(self, upto: float | None = None) -> np.ndarray:
        """Token-weighted share of each true class routed as each predicted class.

        Online it only uses requests that have finished, whose true class is
        then known.
        """
        nc = len(CLASSES)
        mask = slice(None) if upto is None else (self.status == DONE)
        out = np.zeros((nc, nc))
        np.add.at(out, (self.cls[mask], self.pred[mask]), self.inp[mask])
        rows = out.sum(axis=1)
        for i in range(nc):
            if rows[i] > 0:
                out[i] /= rows[i]
            else:
                out[i, i] = 1.0
        return out

    def _forecast(self, row) -> LoadForecast:
        return LoadForecast({c: float(v) for c, v in zip(CLASSES, row)})

    def _build_cluster(self):
        c = self.ctl
        groups = pool_groups(c.pool_count, single=c.single_pool)
        self.state: ClusterState = make_cluster(groups, self.cfg.cluster_nodes)
        self.series = self._forecasts()
        first = self.series[0] if c.scale_instances else self.series.max(axis=0) * self.cfg.provision_scale
        # static sizing sees the whole trace, dynamic sizing starts from the identity
        conf = self._confusion() if not c.scale_instances else None
        plan = cluster_epoch(self.state, self._forecast(first), self.profile, conf)
        self.saturated = plan.saturated
        for a in plan.actions:
            pool = self.state.pools[a.pool]
            pool.overflow_fraction = a.overflow_fraction
            for _ in range(a.nodes):
                self._add_node(pool, 0.0)
        self.scale_targets = {a.pool: a.nodes for a in plan.actions}
        self._refresh()

    def _new_instance(self, tp, freq, node) -> InstanceState:
        inst = InstanceState(self._next_instance, tp, freq, node)
        self._next_instance += 1
        inst.power_w = self.model.idle[self.model.tp_index[tp]] * self.model.to_watts
        return inst

    def _add_node(self, pool, ready_at):
        node = NodeState(self._next_node, pool.index, ready_at=ready_at)
        self._next_node += 1
        layout = pool.target_layout if self.ctl.scale_shards else (8,)
        top = self.profile.max_freq
        node.instances = [self._new_instance(tp, top, node) for tp in layout]
        pool.nodes.append(node)
        self.counters["nodes_created"] += 1
        return node

    def _refresh(self):
        """Recompute per-pool serving lists and the cluster power after a structural change."""
        for pool in self.state.pools:
            pool.live = None
            pool.live = pool.serving_instances(self.now)
        self._dirty_power = True

    # --- request handling ------------------------------------------------------

    def _place(self, r: int, start_pool: int, now: float, fresh: bool = False):
        pools = self.state.pools
        for k in range(start_pool, len(pools)):
            inst = pick_instance(pools[k], now)
            if inst is not None:
                self.pool_of[r] = k
                if fresh:
                    # observed load is demand, counted once where the request lands
                    inst.acc_tokens[self.cls[r]] += self.inp[r]
                self._enqueue(inst, r, now)
                return
        pools[-1].holding.append(r)

    def _enqueue(self, inst: InstanceState, r: int, now: float):
        if not inst.queue and inst.backlog_s < self.ctl.queue_depth_s:
            self._admit(inst, r, now)
        else:
            inst.queue.append(r)

    def _admit(self, inst: InstanceState, r: int, now: float):
        m = self.model
        t, j = m.tp_index[inst.tp], m.freq_index[inst.freq]
        ci = self.cls[r]
        inst.backlog_s += self.inp[r] * m.inv_ml[ci, t, j]
        key = (t, j, inst.util)
        cache = self._lat.get(inst.id)
        if cache is None or cache[0] != key:
            cache = (key, *m.latencies(inst.util, t, j))
            self._lat[inst.id] = cache
        tt, tb = cache[1][ci], cache[2][ci]
        self.ttft[r] = (now - self.arrival[r]) * 1000.0 + tt
        self.tbt[r] = tb
        self.status[r] = ADMITTED
        done = now + (tt + max(0, self.out[r] - 1) * tb) / 1000.0
        heapq.heappush(self.heap, (done, r))

    def _redispatch(self, queue, pool_index, now):
        while queue:
            self._place(queue.popleft(), pool_index, now)

    # --- controllers -------------------------------------------------------------

    def _cluster_epoch(self, epoch: int, now: float, issue: bool):
        """Issue creations ahead of epoch ``epoch``; at its start apply sizes and drains."""
        row = self.series[min(epoch, len(self.series) - 1)]
        plan = cluster_epoch(self.state, self._forecast(row), self.profile, self._confusion(now))
        self.saturated |= plan.saturated
        start = epoch * self.ctl.cluster_epoch_s
        if issue:
            for a in plan.actions:
                pool = self.state.pools[a.pool]
                have = sum(1 for n in pool.nodes if not n.draining)
                free = self.state.capacity_nodes - self.state.allocated_nodes
                for _ in range(max(0, min(a.nodes - have, free))):
                    self._add_node(pool, start)
            self.scale_targets = {a.pool: a.nodes for a in plan.actions}
            return
        for a in plan.actions:
            pool = self.state.pools[a.pool]
            pool.overflow_fraction = a.overflow_fraction
            active = [n for n in pool.nodes if not n.draining]
            excess = len(active) - a.nodes
            if excess > 0:
                # drain the emptiest nodes
                active.sort(key=lambda n: (sum(float(i.loads.sum()) for i in n.instances), -n.id))
                for node in active[:excess]:
                    node.draining = True
                    for inst in node.instances:
                        self._redispatch(inst.queue, pool.index, now)
        self._refresh()

    def _pool_epochs(self, now):
        for pool in self.state.pools:
            acts = pool_epoch(pool, pool.peak_loads, self.profile, self.cfg.overheads, self.ctl, now)
            pool.peak_loads = np.zeros(len(CLASSES))
            nodes = {n.id: n for n in pool.nodes}
            for a in acts:
                node = nodes[a.node]
                self.counters["reshards"] += 1
                rp = reshard.plan(reshard.Layout.from_mix(node.layout), a.layout)
                transfer_s = rp.parallel_time * self.cfg.overheads.t_ms / 1000.0
                node.transition_until = now + a.seconds
                node.pending = (a.layout, a.freqs)
                node.transfer_until = now + transfer_s
                node.transfer_w = len(rp.transfers) * self.cfg.overheads.transfer_power_w
                status = {reshard.NONE: SERVING, reshard.REDUCED: REDUCED,
                          reshard.FULL_STOP: DOWN}[a.downtime]
                for inst in node.instances:
                    inst.status = status
                self._refresh()
                if status == DOWN:
                    for inst in node.instances:
                        self._redispatch(inst.queue, pool.index, now)
            if acts:
                live = [i for n in pool.nodes if n.ready_at <= now and not n.draining for i in n.instances]
                share = sum(1 for i in live if i.serving) / len(live)
                self.min_serving_share = min(self.min_serving_share, share)

    def _set_freq(self, inst: InstanceState, freq: int, now: float):
        if freq == inst.freq:
            return
        m = self.model
        t = m.tp_index[inst.tp]
        old = m.utilization(inst.loads, t, m.freq_index[inst.freq])
        new = m.utilization(inst.loads, t, m.freq_index[freq])
        if old > 0:
            inst.backlog_s *= new / old
        inst.freq = freq
        inst.util = new
        inst.stall_until = now + self.cfg.overheads.freq_switch_ms / 1000.0
        self.counters["freq_changes"] += 1

    def _instance_epochs(self, now):
        for pool in self.state.pools:
            for inst in pool.serving_instances(now):
                act = instance_epoch(inst, self.model, self.ctl.freq_headroom, self.ctl.queue_depth_s / 2)
                if act is None:
                    continue
                self._set_freq(inst, act.freq, now)
                if not act.feasible:
                    self.counters["infeasible_freq"] += 1
                    while inst.emergency_level < 2:
                        self._apply_emergency(inst, escalate(inst), pool, now)

    def _apply_emergency(self, inst, act, pool, now):
        if act.kind in ("reorder", "max_freq", "resteer"):
            self.counters["emergencies"] += 1
        if act.kind == "max_freq":
            self._set_freq(inst, self.profile.max_freq, now)
        elif act.kind == "resteer":
            sibs = [i for i in pool.serving_instances(now) if i is not inst]
            if sibs and inst.queue:
                target = min(sibs, key=lambda i: (i.backlog_s, i.id))
                n_move = len(inst.queue) // 2
                moved = [inst.queue.pop() for _ in range(n_move)]
                for r in reversed(moved):
                    self._enqueue(target, r, now)
                self.counters["resteered"] += n_move
        elif act.kind == "squash":
            keep = type(inst.queue)()
            limit = self.ctl.squash_factor
            for r in inst.queue:
                if (now - self.arrival[r]) * 1000.0 > limit * self.ttft_slo[r]:
                    self.status[r] = SQUASHED
                    self.counters["squashed"] += 1
                else:
                    keep.append(r)
            inst.queue = keep
        if inst.emergency_level >= 1 and len(inst.queue) > 1:
            inst.queue = type(inst.queue)(sorted(inst.queue, key=lambda r: self.arrival[r] +
                                                 self.ttft_slo[r] / 1000.0))

    # --- node events -------------------------------------------------------------

    def _node_events(self, now):
        changed = False
        for pool in self.state.pools:
            for node in list(pool.nodes):
                if node.pending is not None and node.transition_until <= now:
                    self._finish_reshard(pool, node, now)
                    changed = True
                elif node.draining and all(i.backlog_s <= 0 and not i.queue for i in node.instances):
                    pool.nodes.remove(node)
                    self.counters["nodes_removed"] += 1
                    changed = True
            if pool.holding and pool.serving_instances(now):
                self._redispatch(pool.holding, pool.index, now)
        if changed:
            self._refresh()

    def _finish_reshard(self, pool, node, now):
        layout, freqs = node.pending
        old = node.instances
        total = sum((i.loads for i in old), np.zeros(len(CLASSES)))
        m = self.model
        if total.sum() > 0:
            caps = [1.0 / m.utilization(total, m.tp_index[tp], m.freq_index[m.freqs[-1]]) for tp in layout]
        else:
            caps = list(layout)
        share = np.array(caps) / sum(caps)
        node.instances = []
        for tp, f, s in zip(layout, freqs, share):
            inst = self._new_instance(tp, f if self.ctl.scale_freq else self.profile.max_freq, node)
            inst.loads = total * s
            inst.util = m.utilization(inst.loads, m.tp_index[tp], m.freq_index[inst.freq])
            node.instances.append(inst)
        node.pending = None
        node.transfer_w = 0.0
        for inst in old:
            # work already admitted finishes on the outgoing engine
            inst.status = DOWN
        self._refresh()
        for inst in old:
            self._redispatch(inst.queue, pool.index, now)

    # --- accounting ----------------------------------------------------------------

    def _observe(self, now):
        m = self.model
        a = 1.0 - math.exp(-self.ctl.observe_s / self.ctl.ewma_tau_s)
        for pool in self.state.pools:
            pool_load = np.zeros(len(CLASSES))
            for node in pool.nodes:
                for inst in node.instances:
                    rate = inst.acc_tokens / self.ctl.observe_s
                    inst.loads += a * (rate - inst.loads)
                    inst.acc_tokens[:] = 0.0
                    np.maximum(inst.peak, inst.loads, out=inst.peak)
                    t, j = m.tp_index[inst.tp], m.freq_index[inst.freq]
                    inst.util = m.utilization(inst.loads, t, j)
                    if inst.status == DOWN or node.ready_at > now:
                        inst.power_w = m.idle[t] * m.to_watts
                    else:
                        inst.power_w = m.power_w(inst.loads, t, j)
                        if inst.util > 0:
                            w = inst.loads * m.inv_ml[:, t, j]
                            self.energy_by_class += (inst.power_w * self.ctl.observe_s / 3600.0) * w / w.sum()
                    pool_load += rate
            pool.peak_loads = np.maximum(pool.peak_loads, pool_load)
        for pool in self.state.pools:
            for inst in pool.serving_instances(now):
                if self.ctl.scale_freq and inst.util > 1.0 and inst.freq < self.profile.max_freq:
                    # overload between instance epochs: clock up right away
                    j, _ = self.model.choose_freq(inst.loads * self.ctl.freq_headroom, self.model.tp_index[inst.tp])
                    self._set_freq(inst, max(self.model.freqs[j], inst.freq), now)
                act = emergency_step(inst, self.ctl.emergency_k)
                if act.kind != "none":
                    self._apply_emergency(inst, act, pool, now)
                elif inst.emergency_level >= 1 and len(inst.queue) > 1:
                    self._apply_emergency(inst, act, pool, now)
        self._dirty_power = True

    def _power(self, now) -> float:
        idle_gpu = self.profile.idle_power_w
        total = 0.0
        for pool in self.state.pools:
            for node in pool.nodes:
                if node.ready_at > now:
                    total += NODE_GPUS * idle_gpu
                    continue
                used = 0
                for inst in node.instances:
                    total += inst.power_w
                    used += inst.tp
                total += (NODE_GPUS - used) * idle_gpu
                if node.transfer_until > now:
                    total += node.transfer_w
        return total

    # --- main loop -------------------------------------------------------------------

    def run(self) -> SimReport:
        c = self.ctl
        tick = self.tick
        obs_steps = int(round(c.observe_s / tick))
        inst_steps = max(1, int(round(c.instance_epoch_s / tick)))
        pool_steps = max(1, int(round(c.pool_epoch_s / tick)))
        epoch_steps = max(1, int(round(c.cluster_epoch_s / tick)))
        lead_steps = int(round(min(self.cfg.overheads.scale_out_s, c.cluster_epoch_s * 10) / tick))
        n = self.n_ticks
        times = np.arange(n) * tick
        power = np.zeros(n)
        gpus = np.zeros(n, int)
        ptr = 0
        n_req = len(self.arrival)
        depth = c.queue_depth_s
        cap_gpus = self.state.capacity_nodes * NODE_GPUS
        p_now = 0.0
        # creation for epoch e is issued lead_steps before it starts
        issue_at = {}
        if c.scale_instances:
            for e in range(1, int(math.ceil(n / epoch_steps)) + 1):
                issue_at.setdefault(max(0, e * epoch_steps - lead_steps), []).append(e)
        for step in range(n):
            now = step * tick
            self.now = now
            t1 = now + tick
            # arrivals
            while ptr < n_req and self.arrival[ptr] < t1:
                r = ptr
                ptr += 1
                k = route(CLASSES[self.pred[r]], self.state, now, c.overload_threshold)
                self._place(r, k, self.arrival[r], fresh=True)
            # controllers
            if c.scale_instances:
                for e in issue_at.get(step, ()):
                    self._cluster_epoch(e, now, issue=True)
                if step and step % epoch_steps == 0:
                    self._cluster_epoch(step // epoch_steps, now, issue=False)
            self._node_events(now)
            if c.scale_shards and step and step % pool_steps == 0:
                self._pool_epochs(now)
            if c.scale_freq and step % inst_steps == 0:
                self._instance_epochs(now)
            # serve
            for pool in self.state.pools:
                for node in pool.nodes:
                    if node.ready_at > now:
                        continue
                    for inst in node.instances:
                        if inst.status == DOWN:
                            continue
                        busy = tick
                        if inst.stall_until > now:
                            busy = max(0.0, t1 - inst.stall_until)
                        if inst.status == REDUCED:
                            busy *= c.reduced_rate
                        if inst.backlog_s > 0:
                            inst.backlog_s = max(0.0, inst.backlog_s - busy)
                        q = inst.queue
                        while q and inst.backlog_s < depth and not node.draining:
                            self._admit(inst, q.popleft(), t1)
            heap = self.heap
            while heap and heap[0][0] <= t1:
                _, r = heapq.heappop(heap)
                if self.status[r] == ADMITTED:
                    self.status[r] = DONE
            if (step + 1) % obs_steps == 0:
                self._observe(t1)
            if self._dirty_power:
                p_now = self._power(now)
                self._dirty_power = False
            power[step] = p_now
            g = sum(len(p.nodes) for p in self.state.pools) * NODE_GPUS
            if g > cap_gpus:
                raise RuntimeError(f"GPU budget exceeded at t={now:.1f}s: {g} > {cap_gpus}")
            gpus[step] = g
        energy = np.cumsum(power * tick / 3600.0)
        return SimReport(
            policy=self.cfg.policy, tick_s=tick, time_s=times, power_w=power, gpus=gpus,
            energy_wh=energy, request_class=self.cls, predicted_class=self.pred, pool=self.pool_of,
            ttft_ms=self.ttft, tbt_ms=self.tbt, status=self.status.copy(),
            ttft_slo_ms=self.ttft_slo, tbt_slo_ms=self.tbt_slo,
            energy_by_class_wh={c: float(v) for c, v in zip(CLASSES, self.energy_by_class)},
            counters=dict(self.counters, saturated=bool(self.saturated),
                          min_serving_share=self.min_serving_share),
            pool_names=[p.name for p in self.state.pools],
        )


def run(config: SimConfig, requests: Sequence[Request], profile: ProfileTable | None = None,
        model: ServiceModel | None = None) -> SimReport:
    """Simulate ``requests`` under ``config`` and return the report."""
    profile = profile or load_profile(slo=config.slo)
    return Simulator(config, requests, profile, model).run()
