import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from greenpool.optimizer import (
    FleetPlan, Group, OverheadTable, best_config, check_plan, hierarchical, net_benefit,
    select_frequency, solve_exact, solve_shards, transition_cost,
)
from greenpool.workload import CLASSES
from oracles import fleet_oracle


def _random_cases(profile, n, seed, max_gpus=16):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        c = CLASSES[rng.integers(len(CLASSES))]
        gpus = int(rng.integers(2, max_gpus + 1))
        cap = profile.max_load(c, 8, 1980) * gpus / 8
        out.append((c, float(rng.uniform(0, 1.2) * cap), gpus))
    return out


def test_zero_load_is_empty(profile):
    for solve in (solve_exact, solve_shards):
        p = solve(profile, "MM", 0, 8)
        assert p.groups == () and p.energy == 0


def test_mm_2k(profile):
    p = solve_exact(profile, "MM", 2000, 8)
    assert [(g.tp, g.count, g.freq) for g in p.groups] == [(4, 1, 1600)]
    assert p.energy == 3.91


def test_shards_high_load_tp4(profile):
    p = solve_shards(profile, "MM", 4000, 8)
    assert p and any(g.tp == 4 for g in p.groups)
    assert all(g.freq == 1980 for g in p.groups)


def test_infeasible_reports_max_load(profile):
    p = solve_exact(profile, "LL", 50000, 8)
    assert not p and p.max_load == pytest.approx(profile.max_load("LL", 8, 1980))


def test_select_frequency(profile):
    assert select_frequency(profile, "MM", 2000, 4)[:2] == (1600, True)
    assert select_frequency(profile, "SL", 2000, 4)[:2] == (1200, True)
    assert select_frequency(profile, "MM", 50000, 4)[:2] == (1980, False)


def test_best_config_table_rows(profile):
    assert best_config(profile, "SS", 2000) == (2, 1200, 0.77)
    assert best_config(profile, "LL", 2000) == (8, 1600, 11.89)
    assert best_config(profile, "MM", 650) == (4, 1200, 2.93)
    assert best_config(profile, "MM", 4000) == (4, 1980, 4.13)


def test_exact_matches_oracle(profile):
    for c, load, gpus in _random_cases(profile, 30, seed=7, max_gpus=12):
        got = solve_exact(profile, c, load, gpus)
        want = fleet_oracle(profile, c, load, gpus)
        if want is None:
            assert not got
        else:
            assert got.energy == want[0]


def test_shards_dominated_by_exact(profile):
    for c, load, gpus in _random_cases(profile, 100, seed=8):
        e = solve_exact(profile, c, load, gpus)
        s = solve_shards(profile, c, load, gpus)
        assert bool(s) <= bool(e)
        if s:
            assert s.energy >= e.energy


def test_plans_satisfy_constraints(profile):
    for c, load, gpus in _random_cases(profile, 60, seed=9):
        for p in (solve_exact(profile, c, load, gpus), hierarchical(profile, c, load, gpus)):
            if p:
                check_plan(p, profile, c, load, gpus)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(CLASSES), st.floats(0, 12000), st.floats(0, 12000), st.integers(2, 12))
def test_monotone_in_load(profile, c, a, b, gpus):
    lo, hi = sorted((a, b))
    assert solve_exact(profile, c, lo, gpus).energy <= solve_exact(profile, c, hi, gpus).energy


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(CLASSES), st.floats(0, 12000), st.integers(2, 12), st.integers(0, 6))
def test_monotone_in_gpus(profile, c, load, gpus, extra):
    assert solve_exact(profile, c, load, gpus + extra).energy <= solve_exact(profile, c, load, gpus).energy


def test_gpu_cap(profile):
    with pytest.raises(ValueError):
        solve_exact(profile, "MM", 100, 65)


def _plan(profile, cls, load, tp, f):
    return FleetPlan((Group(tp, 1, f, load, profile.query(cls, load, tp, f).energy),))


def test_net_benefit_examples(profile):
    cur = _plan(profile, "MM", 2000, 8, 1200)
    cand = _plan(profile, "MM", 2000, 4, 1600)
    assert net_benefit(cur, cur) == 0.0
    gain = net_benefit(cur, cand, OverheadTable(), 300)
    assert gain > 0
    # steady-state saving is (4.39 - 3.91) Wh per 6 s over 300 s
    assert gain < (4.39 - 3.91) * 50
    same = FleetPlan((Group(4, 1, 1980, 2000, 4.0),))
    other = FleetPlan((Group(8, 1, 1980, 2000, 4.0),))
    assert same.energy == other.energy
    assert net_benefit(same, other, OverheadTable(), 300) < 0


def test_frequency_only_transition(profile):
    a = _plan(profile, "MM", 2000, 4, 1980)
    b = _plan(profile, "MM", 2000, 4, 1600)
    cost = transition_cost(a, b)
    assert cost.energy_wh == 0 and cost.penalty_wh > 0
    assert cost.seconds == pytest.approx(0.065)


def test_overhead_table_file(tmp_path):
    p = tmp_path / "o.ini"
    p.write_text("[overheads]\nt_ms = 40\nscale_out_s = 300\n")
    o = OverheadTable.from_file(p)
    assert o.t_ms == 40 and o.scale_out_s == 300 and o.freq_switch_ms == 65
    assert o.reshard("TP4", "TP8") == (0.04, "none")
    assert o.reshard("TP8", "TP8")[0] == 0
    with pytest.raises(ValueError):
        OverheadTable(t_ms=-1)
