"""Command-line front end.

    greenpool run --spec experiment.ini [--seed N] [--out DIR]
    greenpool sweep --spec experiment.ini --axis error_rate --values 0,0.1,0.2
    greenpool validate [PROFILE]
    greenpool synth-trace OUT --duration 3600 --mean-tps 30000
    greenpool synth-profile OUT [--model llama2-70b]

An experiment spec is an INI file.  ``[experiment]`` names the policies,
``[trace]`` points at a trace file or describes a synthetic one, and the
optional ``[sim]``, ``[profile]``, ``[carbon]``, ``[controller]``,
``[overheads]`` and ``[slo]`` sections override defaults.  Relative paths
are resolved against the spec file's directory.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import profile_data
from .control import ControllerConfig
from .optimizer import OverheadTable, best_config
from .profiles import ProfileError, load_profile, validate
from .sim import ADMITTED, DONE, POLICIES, CarbonTrace, SimConfig, carbon, cost, run
from .workload import (
    DEFAULT_SLO, SloTable, TraceError, diurnal_shape, parse_trace, scale_load,
    synth_trace, write_trace,
)

AXES = ("error_rate", "load_scale", "pool_count")
LOAD_LEVELS = {"low": 0.5, "med": 1.0, "medium": 1.0, "high": 2.0}
VALIDATE_LOADS = {"MM": (650.0, 2000.0, 4000.0)}
VALIDATE_DEFAULT_LOAD = 2000.0


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    name: str
    sim: SimConfig
    policies: tuple[str, ...]
    out: Path
    trace: dict
    profile_path: Path | None
    idle_power_w: float | None
    carbon: dict
    base_dir: Path

    def load_trace(self):
        t = self.trace
        if "path" in t:
            return parse_trace(t["path"])
        prof = diurnal_shape() if t["diurnal"] else None
        return synth_trace(t["duration_s"], t["mean_tps"], diurnal_profile=prof, rng_seed=t["seed"],
                           slo=self.sim.slo)

    def load_profile(self):
        return load_profile(self.profile_path, slo=self.sim.slo, idle_power_w=self.idle_power_w)

    def carbon_trace(self, duration_s: float) -> CarbonTrace:
        if "path" in self.carbon:
            return CarbonTrace.from_csv(self.carbon["path"])
        return CarbonTrace.constant(self.carbon.get("constant", 400.0), duration_s)


def _resolve(base: Path, value: str) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def _float(section, key, default):
    try:
        return section.getfloat(key, default)
    except ValueError as exc:
        raise SpecError(f"[{section.name}] {key}: {exc}") from None


def load_spec(path) -> ExperimentSpec:
    """Parse and check an experiment spec; raises SpecError on any problem."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        if not cp.read(path):
            raise SpecError(f"{path}: cannot read spec file")
    except configparser.Error as exc:
        raise SpecError(f"{path}: {exc}") from None
    base = path.resolve().parent
    known = {"experiment", "trace", "sim", "profile", "carbon", "controller", "overheads", "slo"}
    extra = set(cp.sections()) - known
    if extra:
        raise SpecError(f"{path}: unknown sections: {', '.join(sorted(extra))}")
    if not cp.has_section("experiment"):
        raise SpecError(f"{path}: missing [experiment] section")
    exp = cp["experiment"]
    policies = tuple(p.strip() for p in exp.get("policies", "").split(",") if p.strip())
    if not policies:
        raise SpecError("[experiment] policies must list at least one policy")
    bad = [p for p in policies if p not in POLICIES]
    if bad:
        raise SpecError(f"unknown policies {bad}; choose from {', '.join(POLICIES)}")
    try:
        slo = SloTable.from_file(path) if cp.has_section("slo") else DEFAULT_SLO
        controller = ControllerConfig.from_section(cp["controller"]) if cp.has_section("controller") \
            else ControllerConfig()
        if cp.has_section("overheads"):
            unknown = set(cp["overheads"]) - {f.name for f in fields(OverheadTable)}
            if unknown:
                raise SpecError(f"unknown overhead keys: {', '.join(sorted(unknown))}")
            overheads = OverheadTable.from_file(path)
        else:
            overheads = OverheadTable()
    except SpecError:
        raise
    except (ValueError, KeyError) as exc:
        raise SpecError(f"{path}: {exc}") from None

    s = cp["sim"] if cp.has_section("sim") else cp[cp.default_section]
    sim_keys = {"tick_ms", "cluster_nodes", "error_rate", "seed", "duration_s", "provision_scale",
                "gpu_price_hr", "energy_price_kwh"}
    if cp.has_section("sim") and set(s) - sim_keys:
        raise SpecError(f"unknown [sim] keys: {', '.join(sorted(set(s) - sim_keys))}")
    d = SimConfig()
    try:
        duration = s.get("duration_s", "").strip()
        sim = SimConfig(
            policy=policies[0],
            tick_ms=_float(s, "tick_ms", d.tick_ms),
            cluster_nodes=s.getint("cluster_nodes", d.cluster_nodes),
            controller=controller,
            overheads=overheads,
            slo=slo,
            duration_s=float(duration) if duration else None,
            error_rate=_float(s, "error_rate", d.error_rate),
            provision_scale=_float(s, "provision_scale", d.provision_scale),
            gpu_price_hr=_float(s, "gpu_price_hr", d.gpu_price_hr),
            energy_price_kwh=_float(s, "energy_price_kwh", d.energy_price_kwh),
            seed=s.getint("seed", d.seed),
        )
        sim.validate()
    except ValueError as exc:
        raise SpecError(f"{path}: {exc}") from None

    if not cp.has_section("trace"):
        raise SpecError(f"{path}: missing [trace] section")
    t = cp["trace"]
    if "path" in t:
        tp = _resolve(base, t["path"])
        if not tp.exists():
            raise SpecError(f"trace file not found: {tp}")
        trace = {"path": tp}
    else:
        try:
            trace = {"duration_s": t.getfloat("duration_s"), "mean_tps": t.getfloat("mean_tps"),
                     "diurnal": t.getboolean("diurnal", True), "seed": t.getint("seed", 0)}
        except (TypeError, ValueError) as exc:
            raise SpecError(f"[trace]: {exc}") from None
        if not trace["duration_s"] or not trace["mean_tps"] or trace["duration_s"] <= 0 \
                or trace["mean_tps"] <= 0:
            raise SpecError("[trace] needs path, or positive duration_s and mean_tps")

    profile_path, idle = None, None
    if cp.has_section("profile"):
        pr = cp["profile"]
        if "path" in pr:
            profile_path = _resolve(base, pr["path"])
            if not profile_path.exists():
                raise SpecError(f"profile file not found: {profile_path}")
        idle = _float(pr, "idle_power_w", None)

    carbon_cfg = {}
    if cp.has_section("carbon"):
        c = cp["carbon"]
        if "path" in c:
            cpth = _resolve(base, c["path"])
            if not cpth.exists():
                raise SpecError(f"carbon trace not found: {cpth}")
            carbon_cfg["path"] = cpth
        elif "constant_g_per_kwh" in c:
            carbon_cfg["constant"] = _float(c, "constant_g_per_kwh", 400.0)

    out = Path(exp.get("out", f"runs/{exp.get('name', path.stem)}"))
    return ExperimentSpec(
        name=exp.get("name", path.stem), sim=sim, policies=policies, out=out, trace=trace,
        profile_path=profile_path, idle_power_w=idle, carbon=carbon_cfg, base_dir=base,
    )


# --- commands --------------------------------------------------------------------

def _simulate(spec: ExperimentSpec, cfg: SimConfig, requests, out_dir: Path | None):
    """Run one policy; write its report directory when ``out_dir`` is given."""
    profile = spec.load_profile()
    report = run(cfg, requests, profile)
    duration = len(report.time_s) * report.tick_s
    _, kg = carbon(report, spec.carbon_trace(duration))
    dollars = cost(report, cfg.gpu_price_hr, cfg.energy_price_kwh)
    if out_dir is not None:
        report.write(out_dir, carbon_kg=kg, cost_usd=dollars)
    served_mask = (report.status == ADMITTED) | (report.status == DONE)
    return dict(
        energy_wh=report.total_energy_wh,
        carbon_kg=kg,
        cost_usd=dollars["total"],
        gpu_hours=report.gpu_hours,
        p99_ttft_ms=float(np.percentile(report.ttft_ms[served_mask], 99)) if served_mask.any() else 0.0,
        p99_tbt_ms=float(np.percentile(report.tbt_ms[served_mask], 99)) if served_mask.any() else 0.0,
        violation_rate=report.violation_rate(),
        squashed=report.squashed,
    )


def cmd_run(spec: ExperimentSpec, seed: int | None = None, out: Path | None = None) -> dict:
    out = Path(out) if out is not None else spec.out
    requests = spec.load_trace()
    results = {}
    for policy in spec.policies:
        cfg = replace(spec.sim, policy=policy, seed=spec.sim.seed if seed is None else seed)
        results[policy] = _simulate(spec, cfg, requests, out / policy)
        r = results[policy]
        print(f"{policy:10s} energy {r['energy_wh']:.1f} Wh  carbon {r['carbon_kg']:.3f} kg  "
              f"cost ${r['cost_usd']:.2f}  violations {r['violation_rate']:.4f}  squashed {r['squashed']}")
    return results


def _sweep_point(args):
    spec, axis, value, top, policy, seed = args
    requests = spec.load_trace()
    cfg = replace(spec.sim, policy=policy, seed=spec.sim.seed if seed is None else seed)
    if axis == "error_rate":
        cfg = replace(cfg, error_rate=value)
    elif axis == "pool_count":
        cfg = replace(cfg, controller=replace(cfg.controller, pool_count=int(value)))
    else:
        # static policies keep the cluster provisioned for the largest load of the sweep
        requests = scale_load(requests, value, cfg.seed)
        cfg = replace(cfg, provision_scale=cfg.provision_scale * top / value)
    return _simulate(spec, cfg, requests, None)


def parse_values(axis: str, text: str) -> list[float]:
    if axis not in AXES:
        raise SpecError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if axis == "load_scale" and tok.lower() in LOAD_LEVELS:
            vals.append(LOAD_LEVELS[tok.lower()])
            continue
        try:
            v = float(tok)
        except ValueError:
            raise SpecError(f"bad value {tok!r} for {axis}") from None
        if axis == "pool_count" and (v != int(v) or v < 1):
            raise SpecError("pool_count values must be positive integers")
        if axis == "error_rate" and not 0 <= v <= 1:
            raise SpecError("error_rate values must lie in [0, 1]")
        if axis == "load_scale" and v <= 0:
            raise SpecError("load_scale values must be positive")
        vals.append(v)
    if not vals:
        raise SpecError("--values is empty")
    return vals


def cmd_sweep(spec: ExperimentSpec, axis: str, values: list[float], seed: int | None = None,
              out: Path | None = None, jobs: int = 1) -> list[dict]:
    out = Path(out) if out is not None else spec.out
    top = max(values)
    tasks = [(spec, axis, v, top, p, seed) for v in values for p in spec.policies]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    rows = []
    for (_, _, v, _, policy, _), r in zip(tasks, results):
        rows.append(dict(axis=axis, value=v, policy=policy, **r))
    by = {(r["value"], r["policy"]): r for r in rows}
    for r in rows:
        base = by.get((r["value"], "SinglePool"))
        r["saving_vs_singlepool"] = 1 - r["energy_wh"] / base["energy_wh"] if base else ""
    out.mkdir(parents=True, exist_ok=True)
    cols = ("axis", "value", "policy", "energy_wh", "p99_ttft_ms", "p99_tbt_ms", "violation_rate",
            "squashed", "carbon_kg", "cost_usd", "gpu_hours", "saving_vs_singlepool")
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        s = r["saving_vs_singlepool"]
        print(f"{axis}={r['value']:g} {r['policy']:10s} energy {r['energy_wh']:.1f} Wh  "
              f"p99 TTFT {r['p99_ttft_ms']:.0f} ms  p99 TBT {r['p99_tbt_ms']:.0f} ms  "
              f"violations {r['violation_rate']:.4f}" + (f"  saving {s:.3f}" if s != "" else ""))
    return rows


def optimum_table(profile) -> list[tuple]:
    """(class, load, tp, freq, energy) of the least-energy single instance per table row."""
    rows = []
    for c in profile.classes:
        for load in VALIDATE_LOADS.get(c, (VALIDATE_DEFAULT_LOAD,)):
            best = best_config(profile, c, load)
            rows.append((c, load) + (best if best else (None, None, None)))
    return rows


def cmd_validate(path) -> int:
    try:
        profile = load_profile(path)
        validate(profile)
    except (ProfileError, OSError) as exc:
        print(f"invalid profile: {exc}", file=sys.stderr)
        return 1
    print(f"model {profile.model}: profile OK")
    print(f"{'class':5s} {'load':>6s} {'TP':>3s} {'MHz':>5s} {'Wh':>6s}")
    for c, load, tp, f, e in optimum_table(profile):
        if tp is None:
            print(f"{c:5s} {load:6.0f}   infeasible")
        else:
            print(f"{c:5s} {load:6.0f} {tp:3d} {f:5d} {e:6.2f}")
    return 0


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="greenpool", description="Energy-aware LLM inference cluster simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate every policy of an experiment spec")
    r.add_argument("--spec", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")

    s = sub.add_parser("sweep", help="sweep one parameter and write a comparison CSV")
    s.add_argument("--spec", required=True)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma separated; load_scale also takes low,med,high")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)

    v = sub.add_parser("validate", help="check a profile and print per-class optima")
    v.add_argument("profile", nargs="?", help="profile CSV (default: shipped Llama2-70B data)")

    t = sub.add_parser("synth-trace", help="write a synthetic Poisson trace")
    t.add_argument("out")
    t.add_argument("--duration", type=float, default=3600.0)
    t.add_argument("--mean-tps", type=float, default=30000.0)
    t.add_argument("--flat", action="store_true", help="constant rate instead of a diurnal shape")
    t.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth-profile", help="write a synthetic profile CSV")
    p.add_argument("out")
    p.add_argument("--model", default="llama2-70b", choices=profile_data.MODELS)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "validate":
            return cmd_validate(args.profile)
        if args.cmd == "synth-trace":
            reqs = synth_trace(args.duration, args.mean_tps,
                               diurnal_profile=None if args.flat else diurnal_shape(), rng_seed=args.seed)
            write_trace(reqs, args.out)
            print(f"wrote {len(reqs)} requests to {args.out}")
            return 0
        if args.cmd == "synth-profile":
            path = profile_data.write_profile(args.out, args.model)
            print(f"wrote {path}")
            return 0
        spec = load_spec(args.spec)
        if args.cmd == "run":
            cmd_run(spec, args.seed, args.out)
        else:
            values = parse_values(args.axis, args.values)
            cmd_sweep(spec, args.axis, values, args.seed, args.out, args.jobs)
        return 0
    except (SpecError, ProfileError, TraceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
