"""Request traces, length classification, and the two predictors.

Loads are measured in prompt (input) tokens per second throughout the
package, the same unit the energy profiles are indexed by.
"""

from __future__ import annotations

import configparser
import csv
import gzip
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

BUCKETS = ("S", "M", "L")
CLASSES = tuple(i + o for i in BUCKETS for o in BUCKETS)
CLASS_INDEX = {c: k for k, c in enumerate(CLASSES)}
MAX_INPUT_TOKENS = 8192
TRACE_HEADER = ("timestamp_ms", "input_tokens", "output_tokens")


class TraceError(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class SloTable:
    """Length thresholds and latency targets per bucket.

    ``input_limits``/``output_limits`` are the exclusive upper bounds of the
    S and M buckets; the L bucket takes everything from the M limit up to
    ``max_input``.  Latencies are the targets at the reference 5x service
    multiplier.
    """

    input_limits: tuple[int, int] = (256, 1024)
    output_limits: tuple[int, int] = (100, 350)
    max_input: int = MAX_INPUT_TOKENS
    ttft_ms: tuple[float, float, float] = (250.0, 400.0, 2000.0)
    tbt_ms: tuple[float, float, float] = (100.0, 100.0, 100.0)
    reference_multiplier: float = 5.0

    def __post_init__(self):
        for lims in (self.input_limits, self.output_limits):
            if not 0 < lims[0] < lims[1]:
                raise ValueError(f"thresholds must be strictly increasing: {lims}")
        if self.input_limits[1] > self.max_input:
            raise ValueError("M input limit exceeds the L bound")

    def input_bucket(self, tokens: int) -> str:
        if tokens > self.max_input:
            raise OutOfRange(f"input_tokens={tokens} exceeds {self.max_input}")
        lo, hi = self.input_limits
        return "S" if tokens < lo else "M" if tokens < hi else "L"

    def output_bucket(self, tokens: int) -> str:
        lo, hi = self.output_limits
        return "S" if tokens < lo else "M" if tokens < hi else "L"

    def ttft_slo(self, cls: str, multiplier: float | None = None) -> float:
        base = self.ttft_ms[BUCKETS.index(cls[0])]
        return base if multiplier is None else base * multiplier / self.reference_multiplier

    def tbt_slo(self, cls: str, multiplier: float | None = None) -> float:
        # TBT targets are keyed by the output bucket
        base = self.tbt_ms[BUCKETS.index(cls[1])]
        return base if multiplier is None else base * multiplier / self.reference_multiplier

    def slo(self, cls: str) -> tuple[float, float]:
        return self.ttft_slo(cls), self.tbt_slo(cls)

    @classmethod
    def from_file(cls, path) -> "SloTable":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        s = cp["slo"] if cp.has_section("slo") else cp[cp.default_section]

        def ints(key, default):
            return tuple(int(v) for v in s.get(key).split(",")) if key in s else default

        def floats(key, default):
            return tuple(float(v) for v in s.get(key).split(",")) if key in s else default

        d = cls()
        return cls(
            input_limits=ints("input_limits", d.input_limits),
            output_limits=ints("output_limits", d.output_limits),
            max_input=s.getint("max_input", d.max_input),
            ttft_ms=floats("ttft_ms", d.ttft_ms),
            tbt_ms=floats("tbt_ms", d.tbt_ms),
            reference_multiplier=s.getfloat("reference_multiplier", d.reference_multiplier),
        )


DEFAULT_SLO = SloTable()


@dataclass(slots=True)
class Request:
    id: int
    arrival: float  # ms since trace start
    input_tokens: int
    output_tokens: int
    service_slo_multiplier: float = 5.0

    def __post_init__(self):
        if self.input_tokens < 1 or self.output_tokens < 1:
            raise ValueError(f"request {self.id}: token counts must be >= 1")
        if self.input_tokens > MAX_INPUT_TOKENS:
            raise OutOfRange(f"request {self.id}: input_tokens > {MAX_INPUT_TOKENS}")
        if self.arrival < 0:
            raise ValueError(f"request {self.id}: negative arrival")


def classify(input_tokens: int, output_tokens: int, slo: SloTable = DEFAULT_SLO) -> str:
    """Return the two-letter class, e.g. ``"SM"`` (short input, medium output).

    Boundary values go to the larger bucket.
    """
    return slo.input_bucket(input_tokens) + slo.output_bucket(output_tokens)


# --- trace files -----------------------------------------------------------

def _open_text(path, mode="r"):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), newline="")
    return open(path, mode, newline="")


def parse_trace(path) -> list[Request]:
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceError(f"{path}: line 1: expected header {','.join(TRACE_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                if len(row) != 3:
                    raise ValueError(f"expected 3 fields, got {len(row)}")
                ts = float(row[0])
                inp, outp = int(row[1]), int(row[2])
                out.append(Request(len(out), ts, inp, outp))
            except ValueError as exc:
                raise TraceError(f"{path}: line {lineno}: {exc}") from None
    out.sort(key=lambda r: r.arrival)
    for k, r in enumerate(out):
        r.id = k
    return out


def write_trace(requests: Sequence[Request], path) -> None:
    with _open_text(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in requests:
            w.writerow((f"{r.arrival:.3f}", r.input_tokens, r.output_tokens))


# --- synthetic traces --------------------------------------------------------

# token-length ranges per bucket, sampled log-uniformly
INPUT_RANGES = {"S": (16, 255), "M": (256, 1023), "L": (1024, 8192)}
OUTPUT_RANGES = {"S": (8, 99), "M": (100, 349), "L": (350, 2048)}

# Conversation-like mix: short inputs and long outputs dominate, ML largest
CONVERSATION_MIX = {
    "SS": 0.08, "SM": 0.12, "SL": 0.14,
    "MS": 0.07, "MM": 0.12, "ML": 0.20,
    "LS": 0.08, "LM": 0.09, "LL": 0.10,
}


def _loguniform_mean(lo: int, hi: int) -> float:
    return (hi - lo) / math.log(hi / lo)


def mean_input_tokens(class_mix: Mapping[str, float]) -> float:
    return sum(w * _loguniform_mean(*INPUT_RANGES[c[0]]) for c, w in class_mix.items())


def diurnal_shape(peak_to_valley: float = 3.3, peak_to_mean: float = 1.7,
                  n: int = 24, peak_at: int = 14) -> np.ndarray:
    """Periodic multiplier profile with mean 1 and the given ratios.

    Shape is ``v + (p - v) * ((1 - cos)/2) ** k`` sampled at ``n`` points;
    ``k`` is solved by bisection to hit ``peak_to_mean``.
    """
    if peak_to_valley < 1 or peak_to_mean < 1:
        raise ValueError("ratios must be >= 1")
    if n % 2:
        raise ValueError("n must be even so that peak and valley are sampled")
    phase = 2 * np.pi * (np.arange(n) - peak_at) / n
    base = (1 + np.cos(phase)) / 2

    def ratio(k):
        prof = 1 + (peak_to_valley - 1) * base ** k
        return prof.max() / prof.mean()

    if peak_to_valley == 1:
        return np.ones(n)
    lo, hi = 1e-3, 50.0
    if not ratio(lo) <= peak_to_mean <= ratio(hi):
        raise ValueError("peak_to_mean not attainable with this peak_to_valley")
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if ratio(mid) < peak_to_mean else (lo, mid)
    prof = 1 + (peak_to_valley - 1) * base ** ((lo + hi) / 2)
    return prof / prof.mean()


def synth_trace(duration_s: float, mean_tps: float,
                class_mix: Mapping[str, float] | None = None,
                diurnal_profile: Sequence[float] | None = None,
                rng_seed: int = 0, slo: SloTable = DEFAULT_SLO,
                multiplier: float = 5.0) -> list[Request]:
    """Poisson arrivals whose rate follows ``diurnal_profile``.

    The profile is stretched over the whole duration as equal-length
    piecewise-constant segments; it is normalized to mean 1 so that
    ``mean_tps`` (prompt tokens per second) is preserved in expectation.
    """
    class_mix = dict(CONVERSATION_MIX if class_mix is None else class_mix)
    if mean_tps <= 0 or duration_s <= 0:
        raise ValueError("mean_tps and duration_s must be positive")
    weights = np.array([class_mix.get(c, 0.0) for c in CLASSES], dtype=float)
    if set(class_mix) - set(CLASSES) or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
        raise ValueError("class_mix must be non-negative weights over the 9 classes summing to 1")
    prof = np.ones(1) if diurnal_profile is None else np.asarray(diurnal_profile, float)
    if np.any(prof < 0) or prof.sum() <= 0:
        raise ValueError("diurnal profile must be non-negative")
    prof = prof / prof.mean()

    rng = np.random.default_rng(rng_seed)
    req_rate = mean_tps / mean_input_tokens(class_mix)
    seg = duration_s / len(prof)
    times = []
    for k, m in enumerate(prof):
        cnt = rng.poisson(req_rate * m * seg)
        times.append(np.sort(rng.uniform(k * seg, (k + 1) * seg, cnt)))
    t = np.concatenate(times) if times else np.empty(0)
    n = len(t)
    cls_idx = rng.choice(len(CLASSES), size=n, p=weights)

    def lengths(ranges, which):
        lo = np.array([ranges[CLASSES[c][which]][0] for c in cls_idx], float)
        hi = np.array([ranges[CLASSES[c][which]][1] for c in cls_idx], float)
        x = np.exp(rng.uniform(np.log(lo), np.log(hi + 1)))
        return np.clip(np.floor(x), lo, hi).astype(int)

    inp = lengths(INPUT_RANGES, 0) if n else np.empty(0, int)
    out = lengths(OUTPUT_RANGES, 1) if n else np.empty(0, int)
    return [Request(k, float(t[k] * 1000.0), int(inp[k]), int(out[k]), multiplier)
            for k in range(n)]


def scale_load(requests: Sequence[Request], factor: float, seed: int = 0) -> list[Request]:
    """Thin or replicate a trace so its load is ``factor`` times the original.

    Each request is kept ``floor(factor)`` times plus once more with
    probability ``factor - floor(factor)``.  Copies share the arrival time.
    """
    if factor <= 0:
        raise ValueError("load factor must be positive")
    rng = np.random.default_rng(seed)
    whole = int(math.floor(factor))
    extra = rng.random(len(requests)) < factor - whole
    out = []
    for r, more in zip(requests, extra):
        for _ in range(whole + int(more)):
            out.append(Request(len(out), r.arrival, r.input_tokens, r.output_tokens,
                               r.service_slo_multiplier))
    return out


# --- output-length predictor ---------------------------------------------------

def predict_output_length(request: Request, error_rate: float, rng: np.random.Generator,
                          slo: SloTable = DEFAULT_SLO) -> str:
    """Noisy output bucket: the truth with probability ``1 - error_rate``,
    otherwise a uniformly chosen adjacent bucket."""
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError("error_rate must lie in [0, 1]")
    true = slo.output_bucket(request.output_tokens)
    # always two draws, so runs at different error rates mispredict nested sets
    u, v = rng.random(), rng.random()
    if u >= error_rate:
        return true
    k = BUCKETS.index(true)
    if k != 1:
        return BUCKETS[1]
    return BUCKETS[0] if v < 0.5 else BUCKETS[2]


# --- load predictor ------------------------------------------------------------

@dataclass
class LoadForecast:
    loads: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for c, v in self.loads.items():
            if v < 0:
                raise ValueError(f"negative forecast for {c}")

    def __getitem__(self, cls: str) -> float:
        return self.loads.get(cls, 0.0)

    def total(self) -> float:
        return sum(self.loads.values())


WEEK_S = 7 * 24 * 3600


def predict_load(history: np.ndarray, slot: int, period_slots: int,
                 headroom: float = 1.1, fallback_window: int = 6,
                 classes: Sequence[str] = CLASSES) -> LoadForecast:
    """Template forecast for ``slot``.

    ``history`` has one row per past slot and one column per class.  With
    at least one full period of history the forecast is the maximum load
    seen in the same slot of every past period; otherwise it is the
    maximum of the trailing ``fallback_window`` slots.  Both are scaled
    by ``headroom``.
    """
    hist = np.asarray(history, dtype=float)
    if hist.ndim != 2 or hist.shape[0] == 0:
        raise ValueError("empty load history")
    if hist.shape[1] != len(classes):
        raise ValueError("history must have one column per class")
    end = min(slot, hist.shape[0])
    same = [s for s in range(slot - period_slots, -1, -period_slots) if s < end]
    if same and end >= period_slots:
        peak = hist[same].max(axis=0)
    else:
        peak = hist[max(0, end - fallback_window):end].max(axis=0) if end else hist[:1].max(axis=0)
    return LoadForecast({c: float(v) * headroom for c, v in zip(classes, peak)})


def load_series(requests: Sequence[Request], slot_s: float, n_slots: int | None = None,
                classes_of: Sequence[str] | None = None, peak_window_s: float | None = None,
                slo: SloTable = DEFAULT_SLO) -> np.ndarray:
    """Per-class prompt-token load per slot, shape (n_slots, 9).

    With ``peak_window_s`` each slot holds the peak of the windowed load
    inside it rather than the slot mean.  ``classes_of`` overrides the true
    class of each request (e.g. the router's predicted class).
    """
    if n_slots is None:
        n_slots = int(math.ceil((requests[-1].arrival / 1000.0 + 1e-9) / slot_s)) if requests else 0
    per_slot = 1 if peak_window_s is None else max(1, int(round(slot_s / peak_window_s)))
    win = slot_s / per_slot
    bins = np.zeros((n_slots * per_slot, len(CLASSES)))
    for k, r in enumerate(requests):
        b = int(r.arrival / 1000.0 / win)
        if b < bins.shape[0]:
            c = classes_of[k] if classes_of is not None else classify(r.input_tokens, r.output_tokens, slo)
            bins[b, CLASS_INDEX[c]] += r.input_tokens
    bins /= win
    return bins.reshape(n_slots, per_slot, len(CLASSES)).max(axis=1)
