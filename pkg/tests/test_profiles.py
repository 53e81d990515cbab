import pytest
from hypothesis import given, settings, strategies as st

from greenpool.profile_data import BOLD_CELLS, FREQS, MODELS, profile_path, write_profile
from greenpool.profiles import (
    PoolView, ProfileError, feasible_configs, load_profile,
    max_load, query,
)
from greenpool.workload import CLASSES


def test_shipped_profiles_load():
    for m in MODELS:
        t = load_profile(profile_path(m))
        assert t.model == m
        assert t.freqs == FREQS


def test_query_table_cells(profile):
    assert query(profile, "MM", 2000, 4, 1600).energy == 3.91
    assert query(profile, "SS", 2000, 2, 1200).energy == 0.77


def test_query_interpolates_load(profile):
    e = query(profile, "MM", 1325, 4, 1200).energy
    assert e == pytest.approx((2.93 + 4.23) / 2, rel=1e-6)


def test_query_interpolates_frequency(profile):
    a = query(profile, "MM", 2000, 4, 1600).energy
    b = query(profile, "MM", 2000, 4, 1800).energy
    mid = query(profile, "MM", 2000, 4, 1700).energy
    assert mid == pytest.approx((a + b) / 2, rel=1e-12)


def test_query_above_grid_is_infeasible(profile):
    assert not query(profile, "MM", 1e6, 8, 1980).feasible
    with pytest.raises(ValueError):
        query(profile, "MM", 100, 8, 2500)


def test_feasible_configs_examples(profile):
    assert {tp for tp, _ in feasible_configs(profile, "LL", 2000)} == {8}
    low = feasible_configs(profile, "MM", 650)
    assert (2, 1600) in low
    assert {(4, f) for f in FREQS} <= low and {(8, f) for f in FREQS} <= low
    assert feasible_configs(profile, "MM", 0) == {(tp, f) for tp in (2, 4, 8) for f in FREQS}


def test_max_load_examples(profile):
    assert max_load(profile, "MM", 8, 1980) >= max_load(profile, "MM", 4, 1980)
    assert all(max_load(profile, "MM", 2, f) < 2000 for f in FREQS)
    assert max_load(profile, "MM", 4, 1980) >= 4000


def test_idle_floor(profile):
    for c in CLASSES:
        for tp in profile.tps:
            assert query(profile, c, 0, tp, 1200).energy == pytest.approx(
                80 * tp * profile.window_s / 3600, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(CLASSES), st.floats(0, 15000), st.floats(0, 15000))
def test_feasible_shrinks_with_load(profile, cls, a, b):
    lo, hi = sorted((a, b))
    assert feasible_configs(profile, cls, hi) <= feasible_configs(profile, cls, lo)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(CLASSES), st.floats(0, 15000), st.floats(10, 400))
def test_feasible_shrinks_with_tighter_slo(profile, cls, load, tight):
    ttft, tbt = profile.slo.slo(cls)
    strict = feasible_configs(profile, cls, load, (min(tight, ttft), min(tight, tbt)))
    assert strict <= feasible_configs(profile, cls, load)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(CLASSES), st.sampled_from((2, 4, 8)), st.floats(0, 20000), st.floats(800, 1980))
def test_query_continuous(profile, cls, tp, load, f):
    p = query(profile, cls, load, tp, f)
    q = query(profile, cls, min(load + 1e-3, 20000), tp, f)
    if p.feasible and q.feasible:
        assert abs(p.energy - q.energy) < 1e-3
        assert abs(p.ttft - q.ttft) < 1.0


def _rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return lines[0], lines[1:]


def test_missing_tp_row_rejected(tmp_path, profile):
    header, rows = _rows(profile_path())
    p = tmp_path / "bad.csv"
    p.write_text("\n".join([header] + [r for r in rows if not (r.startswith("MM,") and ",4," in r)]))
    with pytest.raises(ProfileError, match="grid hole"):
        load_profile(p)


def test_ttft_increasing_in_freq_rejected(tmp_path):
    header, rows = _rows(profile_path())
    out = []
    for r in rows:
        f = r.split(",")
        if f[0] == "SS" and f[1] == "650" and f[2] == "8" and f[3] == "1980":
            f[5] = "9999"
        out.append(",".join(f))
    p = tmp_path / "bad.csv"
    p.write_text("\n".join([header] + out))
    with pytest.raises(ProfileError, match="class=SS"):
        load_profile(p)


def test_empty_and_missing_files(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ProfileError):
        load_profile(p)
    with pytest.raises(ProfileError):
        load_profile(tmp_path / "nope.csv")


def test_profile_regenerates_identically(tmp_path):
    out = write_profile(tmp_path / "p.csv")
    assert out.read_text() == profile_path().read_text()


def test_bold_cells_are_argmin(profile):
    from greenpool.optimizer import best_config
    for (model, cls, load), (tp, f, e) in BOLD_CELLS.items():
        t = profile if model == "llama2-70b" else load_profile(profile_path(model))
        assert best_config(t, cls, load) == (tp, f, e)


def test_pool_view_single_class_matches_profile(profile):
    v = PoolView(profile, "ML")
    assert v.energy(1500, 8, 1400) == query(profile, "ML", 1500, 8, 1400).energy
    assert v.capacity(8, 1400) == pytest.approx(max_load(profile, "ML", 8, 1400))


def test_pool_view_mix(profile):
    v = PoolView(profile, {"SS": 1, "LL": 1})
    inv = 0.5 / max_load(profile, "SS", 8, 1980) + 0.5 / max_load(profile, "LL", 8, 1980)
    assert v.capacity(8, 1980) == pytest.approx(1 / inv)
    assert v.feasible(0.99 / inv, 8, 1980) and not v.feasible(1.01 / inv, 8, 1980)
    idle = profile.idle_energy(8)
    assert idle < v.energy(1000, 8, 1980) < v.energy(2000, 8, 1980)
