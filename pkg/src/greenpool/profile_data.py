"""Embedded energy/latency profiles for several 70B-class and smaller models.

Measured cells (energy in Wh at a fixed load, ``None`` where the
configuration violates the SLO) are transcribed per model.  Every other
grid cell comes from a small parametric model:

* Latency.  Each (class, tp, freq) has an SLO capacity
  ``ML = capacity[class][tp] * speed(freq)`` with ``speed`` linear from 0.35
  at 800 MHz to 1.0 at 1980 MHz.  Isolated latencies scale as
  ``(8/tp)**0.5 * (1980/f)**0.15`` (prefill) and ``(8/tp)**0.4 * (1980/f)**0.15``
  (decode) times one fifth of the SLO, and grow with load as
  ``lat0 / (1 - load/sat)`` where ``sat`` is chosen so the binding metric
  reaches its SLO exactly at ``ML``.  Loads at or above ``sat`` are stored
  as ``inf``.  Capacities are picked so the measured SLO-violating cells
  are reproduced at the measured loads.
* Energy.  Unmeasured cells at a measured load: a low frequency that
  violates the SLO costs 10% more per 400 MHz step than the next higher
  frequency; a parallelism with no feasible frequency costs 0.9x the next
  larger parallelism.  Across loads the dynamic part (energy above the
  idle floor) is interpolated between measured loads and extrapolated
  outside them with slope 0.26 per 2000 TPS relative to the nearest
  measured load.  Energy at zero load is the idle floor.  The 1000, 1400
  and 1800 MHz columns are linear in frequency between measured columns.

Energy is reported in Wh per ``ENERGY_WINDOW_S`` seconds of operation at
the given load, so ``energy_wh * 3600 / ENERGY_WINDOW_S`` is the average
power of the instance in watts.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .workload import CLASSES, DEFAULT_SLO, SloTable

FREQS = (800, 1000, 1200, 1400, 1600, 1800, 1980)
MEASURED_FREQS = (800, 1200, 1600, 1980)
TPS = (2, 4, 8)
LOAD_GRID = (0, 325, 650, 1000, 1500, 2000, 3000, 4000, 5000, 6000,
             8000, 10000, 12000, 14000, 16000, 20000)
ENERGY_WINDOW_S = 6.0
IDLE_POWER_W = 80.0
LOAD_SLOPE = 0.26          # relative dynamic-energy growth per 2000 TPS
GRAY_STEP_PENALTY = 0.10
SMALLER_TP_FACTOR = 0.9

_ = None  # gray cell
# rows: TP2 x4, TP4 x4, TP8 x4 at 0.8/1.2/1.6/2.0 GHz
LLAMA2_70B_2K = {
    "SS": (_, 0.77, 0.97, 1.03, 0.94, 0.79, 0.91, 1.01, 1.35, 1.19, 1.29, 1.49),
    "SM": (_, 2.78, 3.45, 3.68, 3.39, 2.82, 3.37, 3.81, 4.55, 4.15, 4.43, 4.74),
    "SL": (_, _, _, _, 4.84, 4.17, 4.97, 5.52, 6.37, 5.62, 5.59, 6.95),
    "MS": (_, _, 1.02, 1.09, _, 1.08, 1.07, 1.20, 1.51, 1.29, 1.34, 1.73),
    "MM": (_, _, _, _, _, 4.23, 3.91, 4.08, 5.34, 4.39, 4.56, 5.44),
    "ML": (_, _, _, _, _, 4.99, 4.66, 4.53, 6.86, 5.79, 6.52, 7.12),
    "LS": (_, _, _, _, _, 1.51, 1.64, 1.76, 2.55, 2.53, 2.83, 2.94),
    "LM": (_, _, _, _, _, _, _, _, _, 7.71, 8.81, 9.17),
    "LL": (_, _, _, _, _, _, _, _, _, 12.99, 11.89, 13.21),
}
LLAMA2_70B_MM_LOADS = {
    650: (_, _, 3.41, 3.75, 3.44, 2.93, 3.71, 3.73, 4.49, 3.76, 4.52, 4.64),
    2000: LLAMA2_70B_2K["MM"],
    4000: (_, _, _, _, _, _, 4.22, 4.13, 5.86, 5.24, 5.42, 6.62),
}
MODELS_MM_2K = {
    "llama2-13b": (1.05, 0.99, 1.14, 1.24, 1.52, 1.27, 1.58, 1.65, 2.61, 2.35, 2.74, 3.45),
    "mixtral-8x7b": (1.03, 0.98, 1.21, 1.32, 1.39, 1.51, 2.09, 2.31, 2.57, 3.06, 3.71, 4.66),
    "llama2-70b": LLAMA2_70B_2K["MM"],
    "llama3-70b": (_, _, _, _, _, 4.32, 4.28, 4.57, 6.11, 5.18, 5.42, 6.45),
    "mixtral-8x22b": (_, _, _, _, _, _, _, _, 3.83, 3.23, 3.65, 4.03),
    "falcon-180b": (_, _, _, _, _, _, _, _, 9.56, 7.94, 8.57, 10.34),
}

# SLO capacity (TPS) at 1980 MHz per class and (TP2, TP4, TP8)
LLAMA2_70B_CAPACITY = {
    "SS": (4500, 7000, 12000), "SM": (4000, 6500, 11000), "SL": (1500, 6000, 10000),
    "MS": (3000, 4500, 10000), "MM": (950, 5400, 12000), "ML": (800, 4200, 9000),
    "LS": (1200, 4000, 8000), "LM": (500, 1800, 5000), "LL": (400, 1500, 4500),
}
MODEL_MM_CAPACITY = {
    "llama2-13b": (6000, 9000, 16000),
    "mixtral-8x7b": (6000, 9000, 16000),
    "llama2-70b": LLAMA2_70B_CAPACITY["MM"],
    "llama3-70b": (950, 5400, 12000),
    "mixtral-8x22b": (500, 1500, 8000),
    "falcon-180b": (500, 1500, 8000),
}

# the cells singled out as energy-optimal for each measured row
BOLD_CELLS = {
    ("llama2-70b", "SS", 2000): (2, 1200, 0.77),
    ("llama2-70b", "SM", 2000): (2, 1200, 2.78),
    ("llama2-70b", "SL", 2000): (4, 1200, 4.17),
    ("llama2-70b", "MS", 2000): (2, 1600, 1.02),
    ("llama2-70b", "MM", 2000): (4, 1600, 3.91),
    ("llama2-70b", "ML", 2000): (4, 1980, 4.53),
    ("llama2-70b", "LS", 2000): (4, 1200, 1.51),
    ("llama2-70b", "LM", 2000): (8, 1200, 7.71),
    ("llama2-70b", "LL", 2000): (8, 1600, 11.89),
    ("llama2-70b", "MM", 650): (4, 1200, 2.93),
    ("llama2-70b", "MM", 4000): (4, 1980, 4.13),
    ("llama2-13b", "MM", 2000): (2, 1200, 0.99),
    ("mixtral-8x7b", "MM", 2000): (2, 1200, 0.98),
    ("llama3-70b", "MM", 2000): (4, 1600, 4.28),
    ("mixtral-8x22b", "MM", 2000): (8, 1200, 3.23),
    ("falcon-180b", "MM", 2000): (8, 1200, 7.94),
}

MODELS = tuple(MODELS_MM_2K)


def speed(freq: float) -> float:
    return 0.35 + 0.65 * (freq - 800) / (1980 - 800)


def idle_energy_wh(tp: int, idle_power_w: float = IDLE_POWER_W) -> float:
    return idle_power_w * tp * ENERGY_WINDOW_S / 3600.0


def measured_rows(model: str) -> dict[str, dict[int, tuple]]:
    """class -> {load: 12-tuple} of transcribed cells for ``model``."""
    if model == "llama2-70b":
        rows = {c: {2000: v} for c, v in LLAMA2_70B_2K.items()}
        rows["MM"] = dict(LLAMA2_70B_MM_LOADS)
        return rows
    return {"MM": {2000: MODELS_MM_2K[model]}}


def capacities(model: str) -> dict[str, tuple]:
    if model == "llama2-70b":
        return LLAMA2_70B_CAPACITY
    return {"MM": MODEL_MM_CAPACITY[model]}


def _latency_cells(cls: str, tp: int, freq: float, cap: float, slo: SloTable):
    ttft_slo, tbt_slo = slo.slo(cls)
    ttft0 = ttft_slo * 0.2 * (8 / tp) ** 0.5 * (1980 / freq) ** 0.15
    tbt0 = tbt_slo * 0.2 * (8 / tp) ** 0.4 * (1980 / freq) ** 0.15
    rho0 = max(ttft0 / ttft_slo, tbt0 / tbt_slo)
    ml = cap * speed(freq)
    sat = ml / (1 - rho0)
    ttft, tbt = [], []
    for load in LOAD_GRID:
        if load >= sat:
            ttft.append(np.inf)
            tbt.append(np.inf)
        else:
            k = 1.0 / (1.0 - load / sat)
            ttft.append(ttft0 * k)
            tbt.append(tbt0 * k)
    return ttft, tbt


def _fill_row(row: tuple) -> dict[tuple[int, int], float]:
    """Complete one measured row: (tp, freq) -> energy for the 4 measured freqs."""
    cells = {}
    for j, tp in enumerate(TPS):
        for i, f in enumerate(MEASURED_FREQS):
            cells[tp, f] = row[4 * j + i]
    for tp in reversed(TPS):
        vals = [cells[tp, f] for f in MEASURED_FREQS]
        if all(v is None for v in vals):
            if tp == TPS[-1]:
                raise ValueError("largest parallelism needs at least one measured cell")
            larger = TPS[TPS.index(tp) + 1]
            for f in MEASURED_FREQS:
                cells[tp, f] = cells[larger, f] * SMALLER_TP_FACTOR
            continue
        # walk down from the highest measured value, then up for any gaps above
        for i in range(len(MEASURED_FREQS) - 2, -1, -1):
            if vals[i] is None and vals[i + 1] is not None:
                vals[i] = vals[i + 1] * (1 + GRAY_STEP_PENALTY)
        for i in range(1, len(MEASURED_FREQS)):
            if vals[i] is None:
                vals[i] = vals[i - 1] * (1 + GRAY_STEP_PENALTY)
        for f, v in zip(MEASURED_FREQS, vals):
            cells[tp, f] = v
    return cells


def _energy_over_loads(anchors: dict[int, float], tp: int) -> list[float]:
    idle = idle_energy_wh(tp)
    loads = sorted(anchors)
    out = []
    for load in LOAD_GRID:
        if load == 0:
            out.append(idle)
        elif load in anchors:
            out.append(anchors[load])
        elif load < loads[0] or load > loads[-1]:
            ref = loads[0] if load < loads[0] else loads[-1]
            dyn = (anchors[ref] - idle) * max(0.0, 1 + LOAD_SLOPE * (load - ref) / 2000)
            out.append(idle + dyn)
        else:
            out.append(float(np.interp(load, loads, [anchors[x] for x in loads])))
    return list(np.maximum.accumulate(out))


def build_rows(model: str = "llama2-70b", slo: SloTable = DEFAULT_SLO) -> list[tuple]:
    """All profile rows ``(class, load, tp, freq, energy, ttft, tbt)`` for a model."""
    rows = []
    caps = capacities(model)
    for cls in CLASSES:
        if cls not in caps:
            continue
        measured = measured_rows(model)[cls]
        filled = {load: _fill_row(r) for load, r in measured.items()}
        for j, tp in enumerate(TPS):
            per_freq = {}
            for f in MEASURED_FREQS:
                per_freq[f] = _energy_over_loads({ld: filled[ld][tp, f] for ld in filled}, tp)
                for ld, r in measured.items():
                    v = r[4 * j + MEASURED_FREQS.index(f)]
                    if v is not None:
                        assert per_freq[f][LOAD_GRID.index(ld)] == v, (cls, tp, f, ld)
            for f in FREQS:
                if f in per_freq:
                    energy = per_freq[f]
                else:
                    lo = max(m for m in MEASURED_FREQS if m < f)
                    hi = min(m for m in MEASURED_FREQS if m > f)
                    w = (f - lo) / (hi - lo)
                    energy = [a + (b - a) * w for a, b in zip(per_freq[lo], per_freq[hi])]
                ttft, tbt = _latency_cells(cls, tp, f, caps[cls][j], slo)
                for k, load in enumerate(LOAD_GRID):
                    rows.append((cls, load, tp, f, energy[k], ttft[k], tbt[k]))
    return rows


def write_profile(path, model: str = "llama2-70b", slo: SloTable = DEFAULT_SLO) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# model: {model}\n")
        fh.write(f"# energy_wh is energy per {ENERGY_WINDOW_S:g} s window at the stated load\n")
        fh.write(f"# idle_power_w: {IDLE_POWER_W:g}\n")
        w = csv.writer(fh)
        w.writerow(("class", "load_tps", "tp", "freq_mhz", "energy_wh", "ttft_ms", "tbt_ms"))
        for cls, load, tp, f, e, ttft, tbt in build_rows(model, slo):
            w.writerow((cls, load, tp, f, repr(round(float(e), 6)),
                        "inf" if np.isinf(ttft) else f"{ttft:.4f}",
                        "inf" if np.isinf(tbt) else f"{tbt:.4f}"))
    return path


def data_dir() -> Path:
    return Path(__file__).parent / "data"


def profile_path(model: str = "llama2-70b") -> Path:
    return data_dir() / f"profile_{model}.csv"
