"""Profile store: (class, load, tp, freq) -> (energy, TTFT, TBT) lookups."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .profile_data import ENERGY_WINDOW_S, IDLE_POWER_W, profile_path
from .workload import CLASSES, DEFAULT_SLO, SloTable

PROFILE_HEADER = ("class", "load_tps", "tp", "freq_mhz", "energy_wh", "ttft_ms", "tbt_ms")
INF = math.inf


class ProfileError(ValueError):
    pass


class Point(NamedTuple):
    energy: float   # Wh per ENERGY_WINDOW_S
    ttft: float     # ms, inf when the load cannot be served
    tbt: float

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.ttft) and math.isfinite(self.tbt)


INFEASIBLE = Point(INF, INF, INF)


def _interp(x: float, xs: np.ndarray, ys: np.ndarray) -> float:
    """Piecewise-linear interpolation that propagates inf and never extrapolates."""
    if x < xs[0] or x > xs[-1]:
        return INF
    i = int(np.searchsorted(xs, x, side="right")) - 1
    if i >= len(xs) - 1:
        return float(ys[-1])
    x0, x1 = xs[i], xs[i + 1]
    if x == x0:
        return float(ys[i])
    y0, y1 = ys[i], ys[i + 1]
    if math.isinf(y0) or math.isinf(y1):
        return INF
    return float(y0 + (y1 - y0) * (x - x0) / (x1 - x0))


def _max_under(xs: np.ndarray, ys: np.ndarray, limit: float) -> float:
    """Largest x with interpolated y <= limit, for y non-decreasing in x."""
    if not ys[0] <= limit:
        return 0.0
    for i in range(len(xs) - 1):
        y1 = ys[i + 1]
        if y1 <= limit:
            continue
        if math.isinf(y1):
            return float(xs[i])
        y0 = ys[i]
        return float(xs[i] + (limit - y0) * (xs[i + 1] - xs[i]) / (y1 - y0))
    return float(xs[-1])


@dataclass(frozen=True, eq=False)
class ProfileTable:
    """Immutable energy/latency grid for one model.

    Arrays are indexed ``[class][tp][freq][load]`` over ``classes``, ``tps``,
    ``freqs`` and a per-class load grid.
    """

    model: str
    classes: tuple[str, ...]
    tps: tuple[int, ...]
    freqs: tuple[int, ...]
    loads: dict[str, np.ndarray]
    energy: dict[str, np.ndarray]
    ttft: dict[str, np.ndarray]
    tbt: dict[str, np.ndarray]
    slo: SloTable = DEFAULT_SLO
    idle_power_w: float = IDLE_POWER_W
    window_s: float = ENERGY_WINDOW_S
    _ml: dict = field(default_factory=dict, repr=False)

    @property
    def min_freq(self) -> int:
        return self.freqs[0]

    @property
    def max_freq(self) -> int:
        return self.freqs[-1]

    def power_w(self, energy_wh: float) -> float:
        return energy_wh * 3600.0 / self.window_s

    def idle_energy(self, tp: int) -> float:
        return self.idle_power_w * tp * self.window_s / 3600.0

    def _freq_slot(self, freq: float):
        if not self.freqs[0] <= freq <= self.freqs[-1]:
            raise ValueError(f"frequency {freq} MHz outside [{self.freqs[0]}, {self.freqs[-1]}]")
        j = int(np.searchsorted(self.freqs, freq, side="right")) - 1
        if j >= len(self.freqs) - 1 or freq == self.freqs[j]:
            return min(j, len(self.freqs) - 1), None, 0.0
        return j, j + 1, (freq - self.freqs[j]) / (self.freqs[j + 1] - self.freqs[j])

    def _check(self, cls: str, tp: int):
        if cls not in self.energy:
            raise KeyError(f"class {cls} not in profile {self.model}")
        if tp not in self.tps:
            raise KeyError(f"tp={tp} not profiled")

    def query(self, cls: str, load: float, tp: int, freq: float) -> Point:
        self._check(cls, tp)
        xs = self.loads[cls]
        if load < 0:
            raise ValueError("negative load")
        if load > xs[-1]:
            return INFEASIBLE
        t = self.tps.index(tp)
        j, j2, w = self._freq_slot(freq)

        def at(arr, jj):
            return _interp(load, xs, arr[cls][t, jj])

        vals = []
        for arr in (self.energy, self.ttft, self.tbt):
            a = at(arr, j)
            if j2 is not None:
                b = at(arr, j2)
                a = INF if math.isinf(a) or math.isinf(b) else a + (b - a) * w
            vals.append(a)
        return Point(*vals)

    def max_load(self, cls: str, tp: int, freq: float, slo: tuple[float, float] | None = None) -> float:
        """Largest load at which (tp, freq) still meets both latency targets."""
        self._check(cls, tp)
        key = (cls, tp, freq, slo)
        hit = self._ml.get(key)
        if hit is not None:
            return hit
        ttft_slo, tbt_slo = slo if slo is not None else self.slo.slo(cls)
        xs = self.loads[cls]
        t = self.tps.index(tp)
        j, j2, w = self._freq_slot(freq)

        def curve(arr):
            y = arr[cls][t, j]
            if j2 is not None:
                y2 = arr[cls][t, j2]
                with np.errstate(invalid="ignore"):
                    y = np.where(np.isinf(y) | np.isinf(y2), INF, y + (y2 - y) * w)
            return y

        ml = min(_max_under(xs, curve(self.ttft), ttft_slo), _max_under(xs, curve(self.tbt), tbt_slo))
        self._ml[key] = ml
        return ml

    def feasible_configs(self, cls: str, load: float, slo: tuple[float, float] | None = None) -> set:
        ttft_slo, tbt_slo = slo if slo is not None else self.slo.slo(cls)
        out = set()
        for tp in self.tps:
            for f in self.freqs:
                p = self.query(cls, load, tp, f)
                if p.ttft <= ttft_slo and p.tbt <= tbt_slo:
                    out.add((tp, f))
        return out

    @cached_property
    def ml_array(self) -> np.ndarray:
        """SLO capacity per [class index over CLASSES, tp index, freq index]; 0 if unprofiled."""
        arr = np.zeros((len(CLASSES), len(self.tps), len(self.freqs)))
        for c in self.classes:
            for t, tp in enumerate(self.tps):
                for j, f in enumerate(self.freqs):
                    arr[CLASSES.index(c), t, j] = self.max_load(c, tp, f)
        return arr


def load_profile(path=None, slo: SloTable = DEFAULT_SLO, idle_power_w: float | None = None) -> ProfileTable:
    """Read and validate a profile CSV; the shipped Llama2-70B dataset by default."""
    path = Path(path) if path is not None else profile_path()
    model = path.stem
    idle = IDLE_POWER_W
    window = ENERGY_WINDOW_S
    records = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ProfileError(f"{path}: {exc}") from None
    with fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                key = key.strip()
                if key == "model":
                    model = val.strip()
                elif key == "idle_power_w":
                    idle = float(val)
                elif key.startswith("energy_wh is energy per"):
                    pass
                continue
            lines.append(line)
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != PROFILE_HEADER:
        raise ProfileError(f"{path}: missing or wrong header, expected {','.join(PROFILE_HEADER)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            cls = row[0].strip()
            if cls not in CLASSES:
                raise ValueError(f"unknown class {cls!r}")
            rec = (cls, float(row[1]), int(row[2]), int(row[3]), float(row[4]), float(row[5]), float(row[6]))
        except (ValueError, IndexError) as exc:
            raise ProfileError(f"{path}: data row {lineno}: {exc}") from None
        if rec[1] < 0 or rec[4] <= 0 or rec[5] <= 0 or rec[6] <= 0:
            raise ProfileError(f"{path}: data row {lineno}: values must be positive")
        records.append(rec)
    if not records:
        raise ProfileError(f"{path}: no profile rows")
    if idle_power_w is not None:
        idle = idle_power_w
    return build_table(records, model=model, slo=slo, idle_power_w=idle, window_s=window)


def build_table(records, model="custom", slo: SloTable = DEFAULT_SLO,
                idle_power_w: float = IDLE_POWER_W, window_s: float = ENERGY_WINDOW_S) -> ProfileTable:
    classes = tuple(c for c in CLASSES if any(r[0] == c for r in records))
    tps = tuple(sorted({r[2] for r in records}))
    freqs = tuple(sorted({r[3] for r in records}))
    cells = {}
    for r in records:
        key = r[:4]
        if key in cells:
            raise ProfileError(f"duplicate cell class={r[0]} load={r[1]:g} tp={r[2]} freq={r[3]}")
        cells[key] = r[4:]
    loads, energy, ttft, tbt = {}, {}, {}, {}
    for c in classes:
        xs = np.array(sorted({r[1] for r in records if r[0] == c}))
        shape = (len(tps), len(freqs), len(xs))
        e, a, b = np.empty(shape), np.empty(shape), np.empty(shape)
        for t, tp in enumerate(tps):
            for j, f in enumerate(freqs):
                for k, x in enumerate(xs):
                    v = cells.get((c, float(x), tp, f))
                    if v is None:
                        raise ProfileError(f"grid hole: class={c} load={x:g} tp={tp} freq={f}")
                    e[t, j, k], a[t, j, k], b[t, j, k] = v
        loads[c], energy[c], ttft[c], tbt[c] = xs, e, a, b
    table = ProfileTable(model, classes, tps, freqs, loads, energy, ttft, tbt, slo, idle_power_w, window_s)
    validate(table)
    return table


def validate(table: ProfileTable) -> None:
    """Raise ProfileError naming the first cell that breaks a monotonicity rule."""
    for c in table.classes:
        xs = table.loads[c]
        for t, tp in enumerate(table.tps):
            for name, arr in (("ttft", table.ttft[c]), ("tbt", table.tbt[c])):
                for j in range(1, len(table.freqs)):
                    bad = np.nonzero(arr[t, j] > arr[t, j - 1])[0]
                    if len(bad):
                        raise ProfileError(
                            f"{name} increases with frequency at class={c} load={xs[bad[0]]:g} "
                            f"tp={tp} freq={table.freqs[j]}")
                with np.errstate(invalid="ignore"):
                    bad = np.nonzero(np.diff(arr[t], axis=1) < 0)
                if len(bad[0]):
                    j, k = bad[0][0], bad[1][0]
                    raise ProfileError(
                        f"{name} decreases with load at class={c} load={xs[k + 1]:g} "
                        f"tp={tp} freq={table.freqs[j]}")
    for c in table.classes:
        for t, tp in enumerate(table.tps):
            for j, f in enumerate(table.freqs):
                ml = table.max_load(c, tp, f)
                if j and ml < table.max_load(c, tp, table.freqs[j - 1]):
                    raise ProfileError(f"max load decreases with frequency at class={c} tp={tp} freq={f}")
                if t and ml < table.max_load(c, table.tps[t - 1], f):
                    raise ProfileError(f"max load decreases with parallelism at class={c} tp={tp} freq={f}")


def query(table: ProfileTable, cls: str, load: float, tp: int, freq: float) -> Point:
    return table.query(cls, load, tp, freq)


def feasible_configs(table: ProfileTable, cls: str, load: float, slo=None) -> set:
    return table.feasible_configs(cls, load, slo)


def max_load(table: ProfileTable, cls: str, tp: int, freq: float, slo=None) -> float:
    return table.max_load(cls, tp, freq, slo)


class PoolView:
    """Energy and capacity of an instance serving a fixed mix of classes.

    Each class consumes ``load_c / ML_c`` of the instance's capacity.  The
    instance is feasible while that utilization stays at or below 1, and
    its dynamic energy is the utilization-weighted mix of each class's
    dynamic energy at the load that would produce the same utilization.
    With a single class this reduces to the profile itself.
    """

    def __init__(self, table: ProfileTable, mix: str | Mapping[str, float],
                 slo: SloTable | None = None):
        if isinstance(mix, str):
            mix = {mix: 1.0}
        total = sum(mix.values())
        if total <= 0:
            raise ValueError("empty class mix")
        self.table = table
        self.mix = {c: w / total for c, w in mix.items() if w > 0}
        self.single = next(iter(self.mix)) if len(self.mix) == 1 else None
        self.slo = slo

    def _ml(self, c: str, tp: int, freq: float) -> float:
        return self.table.max_load(c, tp, freq, None if self.slo is None else self.slo.slo(c))

    def inv_capacity(self, tp: int, freq: float) -> float:
        s = 0.0
        for c, w in self.mix.items():
            ml = self._ml(c, tp, freq)
            if ml <= 0:
                return INF
            s += w / ml
        return s

    def capacity(self, tp: int, freq: float) -> float:
        inv = self.inv_capacity(tp, freq)
        return 0.0 if math.isinf(inv) else 1.0 / inv

    def feasible(self, load: float, tp: int, freq: float) -> bool:
        if self.single is not None:
            return load <= self._ml(self.single, tp, freq)
        return load * self.inv_capacity(tp, freq) <= 1.0 + 1e-12

    def energy(self, load: float, tp: int, freq: float) -> float:
        if self.single is not None:
            return self.table.query(self.single, load, tp, freq).energy
        u = load * self.inv_capacity(tp, freq)
        idle = self.table.idle_energy(tp)
        if u == 0:
            return idle
        dyn = 0.0
        for c, w in self.mix.items():
            ml = self._ml(c, tp, freq)
            share = (w / ml) * load / u
            x = min(u * ml, self.table.loads[c][-1])
            dyn += share * (self.table.query(c, x, tp, freq).energy - idle)
        return idle + dyn
