import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greenpool import sim
from greenpool.control import NODE_GPUS, ControllerConfig, ServiceModel
from greenpool.workload import CLASS_INDEX, CLASSES, Request, synth_trace

FAST = ControllerConfig(cluster_epoch_s=30, pool_epoch_s=6, instance_epoch_s=2)


@pytest.fixture(scope="module")
def model(profile):
    return ServiceModel(profile)


@pytest.fixture(scope="module")
def trace():
    return synth_trace(120, 4000, diurnal_profile=[1, 2, 1], rng_seed=3)


def _cfg(policy="AllKnobs", **kw):
    kw.setdefault("controller", FAST)
    kw.setdefault("cluster_nodes", 16)
    return sim.SimConfig(policy=policy, **kw)


def _run(profile, model, requests, policy="AllKnobs", **kw):
    return sim.run(_cfg(policy, **kw), requests, profile, model)


def _flat_report(power_w, seconds, gpus=8, tick_s=1.0):
    n = int(seconds / tick_s)
    power = np.full(n, float(power_w))
    return sim.SimReport(
        policy="x", tick_s=tick_s, time_s=np.arange(n) * tick_s, power_w=power,
        gpus=np.full(n, gpus), energy_wh=np.cumsum(power * tick_s / 3600.0),
        request_class=np.zeros(0, int), predicted_class=np.zeros(0, int), pool=np.zeros(0, int),
        ttft_ms=np.zeros(0), tbt_ms=np.zeros(0), status=np.zeros(0, np.int8),
        ttft_slo_ms=np.zeros(0), tbt_slo_ms=np.zeros(0), energy_by_class_wh={},
        counters={}, pool_names=[],
    )


# --- configuration ----------------------------------------------------------------

def test_baseline_knobs():
    s = sim.baseline("SinglePool")
    assert s.single_pool and not (s.scale_instances or s.scale_shards or s.scale_freq)
    a = sim.baseline("AllKnobs")
    assert a.scale_instances and a.scale_shards and a.scale_freq and not a.single_pool
    for name, knob in (("ScaleInst", "scale_instances"), ("ScaleShard", "scale_shards"),
                       ("ScaleFreq", "scale_freq")):
        c = sim.baseline(name)
        on = [k for k in ("scale_instances", "scale_shards", "scale_freq") if getattr(c, k)]
        assert on == [knob]
    with pytest.raises(ValueError):
        sim.baseline("Nope")


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(tick_ms=500).validate()
    with pytest.raises(ValueError):
        _cfg(error_rate=1.5).validate()
    with pytest.raises(ValueError):
        _cfg(policy="Nope").validate()
    _cfg().validate()


def test_unsorted_trace_rejected(profile, model):
    reqs = [Request(0, 500.0, 100, 50), Request(1, 100.0, 100, 50)]
    with pytest.raises(ValueError):
        _run(profile, model, reqs)


# --- examples ---------------------------------------------------------------------

@pytest.mark.parametrize("policy", ["SinglePool", "AllKnobs"])
def test_empty_trace_idle_floor(profile, model, policy):
    r = _run(profile, model, [], policy, duration_s=60)
    gpus = int(r.gpus[0])
    assert gpus == NODE_GPUS
    assert r.total_energy_wh == pytest.approx(profile.idle_power_w * gpus * 60 / 3600, rel=1e-9)


def test_single_ss_request_on_tp2_1200(profile, model):
    reqs = [Request(0, 1000.0, 100, 50)]
    s = sim.Simulator(_cfg("MultiPool", duration_s=10), reqs, profile, model)
    for pool in s.state.pools:
        for node in pool.nodes:
            node.instances = [s._new_instance(2, 1200, node)]
    s._refresh()
    r = s.run()
    assert r.status[0] == sim.DONE
    assert r.ttft_ms[0] <= 250 and r.tbt_ms[0] <= 100


def test_singlepool_never_reconfigures(profile, model, trace):
    c = _run(profile, model, trace, "SinglePool").counters
    assert c["reshards"] == 0 and c["freq_changes"] == 0 and c["nodes_removed"] == 0


def test_scalefreq_never_scales_or_reshards(profile, model, trace):
    r = _run(profile, model, trace, "ScaleFreq")
    assert r.counters["reshards"] == 0 and r.counters["nodes_removed"] == 0
    assert len(set(r.gpus.tolist())) == 1


def test_allknobs_below_singlepool(profile, model, trace):
    a = _run(profile, model, trace, "AllKnobs").total_energy_wh
    s = _run(profile, model, trace, "SinglePool").total_energy_wh
    assert a < s


def test_overload_squashes_and_counts(profile, model):
    reqs = synth_trace(60, 60000, rng_seed=1)
    r = _run(profile, model, reqs, "SinglePool", cluster_nodes=1)
    assert r.squashed > 0
    assert r.summary()["requests"]["squashed"] == r.squashed == r.counters["squashed"]


# --- properties -------------------------------------------------------------------

def _check_invariants(r, cluster_nodes):
    # energy conservation
    assert r.energy_wh[-1] == pytest.approx(float(np.sum(r.power_w)) * r.tick_s / 3600.0, rel=1e-9)
    # request conservation
    req = r.summary()["requests"]
    assert req["arrived"] == req["completed"] + req["squashed"] + req["in_flight"]
    # GPU budget at every tick
    assert np.all(r.gpus <= cluster_nodes * NODE_GPUS)
    # stagger
    assert r.counters["min_serving_share"] >= 0.5


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.floats(500, 12000), st.sampled_from(sim.POLICIES),
       st.sampled_from([0.0, 0.2]), st.integers(2, 16))
def test_invariants_property(profile, model, seed, tps, policy, err, nodes):
    reqs = synth_trace(60, tps, diurnal_profile=[1, 3], rng_seed=seed)
    r = _run(profile, model, reqs, policy, error_rate=err, cluster_nodes=nodes, seed=seed)
    _check_invariants(r, nodes)


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(sim.POLICIES))
def test_determinism_property(profile, model, seed, policy):
    reqs = synth_trace(40, 5000, diurnal_profile=[1, 2], rng_seed=seed)
    a = _run(profile, model, reqs, policy, error_rate=0.2, seed=seed)
    b = _run(profile, model, reqs, policy, error_rate=0.2, seed=seed)
    assert np.array_equal(a.power_w, b.power_w)
    assert np.array_equal(a.status, b.status)
    assert np.array_equal(a.ttft_ms, b.ttft_ms, equal_nan=True)
    assert json.dumps(a.summary(), sort_keys=True) == json.dumps(b.summary(), sort_keys=True)


def test_latency_floor(profile, model, trace):
    top = model.freq_index[profile.max_freq]
    floor = model.ttft[:, :, top, 0].min(axis=1)
    for policy in sim.POLICIES:
        r = _run(profile, model, trace, policy, error_rate=0.1)
        ok = (r.status == sim.ADMITTED) | (r.status == sim.DONE)
        assert np.all(r.ttft_ms[ok] >= floor[r.request_class[ok]] - 1e-9)


def test_percentiles_match_records(profile, model, trace):
    r = _run(profile, model, trace)
    stats = r.latency_stats()
    ok = (r.status == sim.ADMITTED) | (r.status == sim.DONE)
    for c in CLASSES:
        m = ok & (r.request_class == CLASS_INDEX[c])
        if m.any():
            assert stats[c]["p99_ttft_ms"] == pytest.approx(np.percentile(r.ttft_ms[m], 99))


def test_tick_halving_stable(profile, model, shipped_slice):
    reqs, ctl, overheads = shipped_slice
    a = _run(profile, model, reqs, controller=ctl, overheads=overheads, tick_ms=100)
    b = _run(profile, model, reqs, controller=ctl, overheads=overheads, tick_ms=50)
    assert abs(a.total_energy_wh - b.total_energy_wh) / a.total_energy_wh < 0.01


# --- carbon and cost --------------------------------------------------------------

def test_carbon_one_kwh():
    r = _flat_report(1000.0, 3600)
    kg_series, kg = sim.carbon(r, sim.CarbonTrace.constant(200.0, 3600))
    assert kg == pytest.approx(0.2)
    assert len(kg_series) == 3600


def test_carbon_zero_intensity():
    r = _flat_report(1000.0, 60)
    assert sim.carbon(r, sim.CarbonTrace.constant(0.0, 60))[1] == 0.0


def test_carbon_coverage_gap():
    r = _flat_report(1000.0, 60)
    with pytest.raises(ValueError):
        sim.carbon(r, sim.CarbonTrace.constant(100.0, 30))


def test_carbon_trace_validation():
    with pytest.raises(ValueError):
        sim.CarbonTrace(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        sim.CarbonTrace(np.array([1.0, 0.0]), np.array([1.0, 1.0]))


@settings(max_examples=30, deadline=None)
@given(st.floats(1, 5000), st.floats(1, 5000), st.one_of(st.just(0.0), st.floats(1e-3, 800)))
def test_carbon_linear_in_energy(pa, pb, g):
    ta = sim.CarbonTrace.constant(g, 100)
    a, b = _flat_report(pa, 100), _flat_report(pb, 100)
    ca, cb = sim.carbon(a, ta)[1], sim.carbon(b, ta)[1]
    if g > 0:
        assert ca / cb == pytest.approx(a.total_energy_wh / b.total_energy_wh, rel=1e-9)


def test_cost_examples():
    r = _flat_report(1000.0, 3600, gpus=0)
    c = sim.cost(r, 2.5, 0.12)
    assert c["gpu"] == 0 and c["total"] == pytest.approx(0.12)
    full, half = _flat_report(1000.0, 3600, gpus=8), _flat_report(1000.0, 3600, gpus=4)
    assert sim.cost(half, 2.5, 0.12)["gpu"] == pytest.approx(sim.cost(full, 2.5, 0.12)["gpu"] / 2)
    assert sim.cost(half, 2.5, 0.12)["energy"] == sim.cost(full, 2.5, 0.12)["energy"]


# --- output -----------------------------------------------------------------------

def test_report_files(profile, model, trace, tmp_path):
    r = _run(profile, model, trace)
    out = r.write(tmp_path / "rep", carbon_kg=1.0, cost_usd={"total": 1.0})
    summ = json.loads((out / "summary.json").read_text())
    assert summ["energy_wh"] == pytest.approx(r.total_energy_wh)
    rows = (out / "requests.csv").read_text().splitlines()
    assert len(rows) == len(trace) + 1
    ts = (out / "timeseries.csv").read_text().splitlines()
    assert len(ts) == len(r.time_s) + 1


def test_error_rate_changes_predictions_only(profile, model, trace):
    a = _run(profile, model, trace, error_rate=0.0)
    b = _run(profile, model, trace, error_rate=0.3)
    assert np.array_equal(a.request_class, b.request_class)
    assert np.array_equal(a.predicted_class, a.request_class)
    wrong = np.mean(b.predicted_class != b.request_class)
    assert 0.2 < wrong < 0.4
    assert replace(_cfg(), error_rate=0.3).error_rate == 0.3
