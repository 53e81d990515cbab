import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greenpool.control import (
    MAX_LEVEL, ControllerConfig, InstanceState, NodeState, ServiceModel, cluster_epoch,
    emergency_step, escalate, instance_epoch, make_cluster, pick_instance, pool_capacity,
    pool_epoch, pool_groups, route,
)
from greenpool.optimizer import OverheadTable
from greenpool.workload import CLASS_INDEX, CLASSES, LoadForecast


@pytest.fixture(scope="module")
def model(profile):
    return ServiceModel(profile)


def _cluster(pool_count=9):
    return make_cluster(pool_groups(pool_count), 64)


def _fill(pool, n, layout=(8,), freq=1980, first_id=0):
    iid = first_id
    for k in range(n):
        node = NodeState(first_id + k, pool.index)
        node.instances = [InstanceState(iid + i, tp, freq, node) for i, tp in enumerate(layout)]
        iid += len(layout)
        pool.nodes.append(node)
    return pool


def _loads(**kw):
    v = np.zeros(len(CLASSES))
    for c, x in kw.items():
        v[CLASS_INDEX[c]] = x
    return v


def _forecast(**kw):
    return LoadForecast({c: kw.get(c, 0.0) for c in CLASSES})


# --- pools and routing -----------------------------------------------------------

def test_pool_groups_shapes():
    assert pool_groups(9) == [(c,) for c in CLASSES]
    assert pool_groups(1) == [tuple(CLASSES)]
    assert sorted(c for g in pool_groups(4) for c in g) == sorted(CLASSES)
    g16 = pool_groups(16)
    assert len(g16) == 16 and set(c for g in g16 for c in g) == set(CLASSES)


def test_every_class_maps_to_a_pool():
    for n in (1, 2, 4, 9, 12, 16):
        state = _cluster(n)
        assert set(state.class_pools) == set(CLASSES)


def test_route_idle_pool_keeps_class():
    state = _cluster()
    for pool in state.pools:
        _fill(pool, 1, first_id=10 * pool.index)
    assert route("SS", state, 0.0) == CLASSES.index("SS")


def test_route_overloaded_goes_to_next_pool():
    state = _cluster()
    for pool in state.pools:
        _fill(pool, 1, first_id=10 * pool.index)
    state.pools[0].nodes[0].instances[0].backlog_s = 5.0
    assert route("SS", state, 0.0) == CLASSES.index("SM")


def test_route_last_pool_keeps_overflow():
    state = _cluster()
    for pool in state.pools:
        _fill(pool, 1, first_id=10 * pool.index)
    state.pools[-1].nodes[0].instances[0].backlog_s = 50.0
    assert route("LL", state, 0.0) == CLASSES.index("LL")


def test_route_empty_pool_forwards():
    state = _cluster()
    _fill(state.pools[-1], 1)
    assert route("SS", state, 0.0) == len(CLASSES) - 1


def test_route_overflow_fraction_share():
    state = _cluster()
    for pool in state.pools:
        _fill(pool, 1, first_id=10 * pool.index)
    state.pools[0].overflow_fraction = 0.25
    dest = [route("SS", state, 0.0) for _ in range(400)]
    assert dest.count(1) == 100


def test_pick_instance_least_backlog():
    state = _cluster()
    pool = _fill(state.pools[0], 1, layout=(2, 2, 2, 2))
    pool.nodes[0].instances[0].backlog_s = 1.0
    pool.nodes[0].instances[1].backlog_s = 0.2
    pool.nodes[0].instances[2].backlog_s = 0.5
    pool.nodes[0].instances[3].backlog_s = 0.9
    assert pick_instance(pool, 0.0) is pool.nodes[0].instances[1]


# --- cluster epoch ---------------------------------------------------------------

def test_ceiling_sizing(profile):
    # a lone pool holding all its load needs ceil(PL / ML) nodes
    state = _cluster(1)
    ml = profile.max_load("LL", 8, 1980)
    plan = cluster_epoch(state, _forecast(LL=2.5 * ml), profile)
    assert plan.actions[0].nodes == 3


def test_zero_load_pool_gets_no_nodes(profile):
    state = _cluster()
    ml = profile.max_load("LL", 8, 1980)
    plan = cluster_epoch(state, _forecast(LL=ml), profile)
    ss = plan.actions[0]
    assert ss.nodes == 0 and ss.overflow_fraction == 1.0
    assert plan.actions[-1].nodes == 1


def test_fragmentation_two_classes(profile):
    state = _cluster()
    mm = 2.5 * pool_capacity(profile, {"MM": 1.0}, ("MM",))
    ll = 2.5 * pool_capacity(profile, {"LL": 1.0}, ("LL",))
    plan = cluster_epoch(state, _forecast(MM=mm, LL=ll), profile)
    a = {CLASSES[x.pool]: x for x in plan.actions}
    assert a["MM"].nodes == 2
    assert a["MM"].overflow_fraction == pytest.approx(0.2)
    # the 0.5 node-units left over ride through the empty pools into LL
    assert a["LL"].nodes == 3
    assert not plan.saturated


def test_saturation_is_flagged(profile):
    state = make_cluster(pool_groups(9), 4)
    ml = profile.max_load("LL", 8, 1980)
    plan = cluster_epoch(state, _forecast(LL=10 * ml), profile)
    assert plan.saturated
    assert sum(a.nodes for a in plan.actions) == 4
    assert plan.residual_units > 0


def test_confusion_moves_sizing(profile):
    state = _cluster()
    ml = profile.max_load("SS", 8, 1980)
    conf = np.eye(len(CLASSES))
    i, j = CLASS_INDEX["SS"], CLASS_INDEX["SL"]
    conf[i] = 0.0
    conf[i, j] = 1.0
    plan = cluster_epoch(state, _forecast(SS=3 * ml), profile, conf)
    assert plan.actions[i].nodes == 0
    assert sum(a.nodes for a in plan.actions) >= 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 40000), min_size=9, max_size=9), st.integers(1, 64))
def test_cluster_budget_property(profile, loads, cap):
    state = make_cluster(pool_groups(9), cap)
    plan = cluster_epoch(state, LoadForecast(dict(zip(CLASSES, loads))), profile)
    assert sum(a.nodes for a in plan.actions) <= cap
    assert all(a.nodes >= 0 and 0.0 <= a.overflow_fraction <= 1.0 for a in plan.actions)


# --- pool epoch ------------------------------------------------------------------

def test_stagger_four_nodes(profile):
    state = _cluster()
    pool = _fill(state.pools[CLASS_INDEX["MM"]], 4)
    cfg, oh = ControllerConfig(), OverheadTable()
    loads = _loads(MM=4 * 650)
    first = pool_epoch(pool, loads, profile, oh, cfg, 0.0)
    assert len(first) == 2
    assert first[0].benefit_wh >= first[1].benefit_wh
    busy = {a.node for a in first}
    for node in pool.nodes:
        if node.id in busy:
            node.pending = ((4,), (1200,))
    # nodes still in transition use up the budget
    assert pool_epoch(pool, loads, profile, oh, cfg, 1.0) == []
    for node in pool.nodes:
        if node.id in busy:
            node.pending = None
            node.instances = [InstanceState(100 + node.id, 4, 1200, node)]
    second = pool_epoch(pool, loads, profile, oh, cfg, 2.0)
    assert {a.node for a in second} == {n.id for n in pool.nodes} - busy


def test_mm_load_drop_moves_to_tp4_low_freq(profile):
    state = _cluster()
    pool = _fill(state.pools[CLASS_INDEX["MM"]], 1)
    cfg, oh = ControllerConfig(), OverheadTable()
    acts = pool_epoch(pool, _loads(MM=650), profile, oh, cfg, 0.0)
    assert len(acts) == 1
    assert acts[0].layout == (4,) and acts[0].freqs == (1200,)


def test_no_action_without_benefit(profile):
    state = _cluster()
    pool = _fill(state.pools[CLASS_INDEX["LL"]], 2)
    cfg, oh = ControllerConfig(), OverheadTable()
    ml = profile.max_load("LL", 8, 1980)
    assert pool_epoch(pool, _loads(LL=1.5 * ml), profile, oh, cfg, 0.0) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.floats(0, 20000), st.sampled_from(CLASSES),
       st.sampled_from([(8,), (4, 4), (2, 2, 2, 2), (4, 2, 2)]))
def test_stagger_property(profile, n, load, cls, layout):
    state = _cluster()
    pool = _fill(state.pools[CLASS_INDEX[cls]], n, layout=layout)
    acts = pool_epoch(pool, _loads(**{cls: load}), profile, OverheadTable(), ControllerConfig(), 0.0)
    assert len(acts) <= math.ceil(n / 2)
    n_inst = sum(len(x.instances) for x in pool.nodes)
    stopped = sum(len(layout) for a in acts if a.downtime == "full_stop")
    assert n_inst - stopped >= n_inst // 2


# --- instance epoch and ladder ---------------------------------------------------

def test_mm_2000_on_tp4_runs_at_1600(model):
    inst = InstanceState(0, 4, 1980)
    inst.loads = _loads(MM=2000)
    act = instance_epoch(inst, model, headroom=1.0)
    assert act.freq == 1600 and act.feasible


def test_same_frequency_no_action(model):
    inst = InstanceState(0, 4, 1600)
    inst.loads = _loads(MM=2000)
    assert instance_epoch(inst, model, headroom=1.0) is None


def test_infeasible_goes_to_top(model):
    inst = InstanceState(0, 4, 1200)
    inst.loads = _loads(MM=50000)
    act = instance_epoch(inst, model, headroom=1.0)
    assert act.freq == 1980 and not act.feasible


def test_no_downclock_with_queue(model):
    inst = InstanceState(0, 4, 1980)
    inst.loads = _loads(MM=650)
    inst.queue.append(1)
    assert instance_epoch(inst, model, headroom=1.0) is None


def test_epoch_uses_peak_since_last(model):
    inst = InstanceState(0, 4, 1980)
    inst.loads = _loads(MM=650)
    inst.peak = _loads(MM=2000)
    assert instance_epoch(inst, model, headroom=1.0).freq == 1600
    assert inst.peak.sum() == 0


def test_ladder_climbs_in_order():
    inst = InstanceState(0, 8, 1980)
    kinds = []
    for q in range(1, 20):
        inst.queue.append(q)
        act = emergency_step(inst, k=3)
        if act.kind != "none":
            kinds.append(act.kind)
    assert kinds[:4] == ["reorder", "max_freq", "resteer", "squash"]
    assert inst.emergency_level == MAX_LEVEL


def test_ladder_stays_at_zero_when_shrinking():
    inst = InstanceState(0, 8, 1980)
    for _ in range(10):
        assert emergency_step(inst).level == 0


def test_ladder_relaxes_after_shrinking():
    inst = InstanceState(0, 8, 1980)
    inst.emergency_level = 2
    levels = [emergency_step(inst, k=3).level for _ in range(6)]
    assert levels == [2, 2, 1, 1, 1, 0]


def test_escalate_one_rung():
    inst = InstanceState(0, 8, 1980)
    assert escalate(inst).kind == "reorder"
    assert escalate(inst).kind == "max_freq"
    inst.emergency_level = MAX_LEVEL
    assert escalate(inst).level == MAX_LEVEL


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=60), st.integers(1, 5))
def test_ladder_monotone_property(qlens, k):
    inst = InstanceState(0, 8, 1980)
    prev = 0
    for q in qlens:
        inst.queue.clear()
        inst.queue.extend(range(q))
        act = emergency_step(inst, k)
        assert abs(act.level - prev) <= 1
        assert 0 <= act.level <= MAX_LEVEL
        prev = act.level


def test_controller_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ControllerConfig(pool_epoch_s=0)
    with pytest.raises(ValueError):
        ControllerConfig(pool_count=0)

