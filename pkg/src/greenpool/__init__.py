"""Energy-aware configuration and simulation of LLM inference clusters."""

from .optimizer import OverheadTable, hierarchical, net_benefit, select_frequency, solve_exact, solve_shards
from .profiles import ProfileTable, load_profile
from .reshard import Layout, plan as reshard_plan
from .sim import POLICIES, CarbonTrace, SimConfig, SimReport, baseline, carbon, cost, run
from .workload import CLASSES, DEFAULT_SLO, Request, SloTable, classify, parse_trace, synth_trace

__version__ = "0.1.0"

__all__ = [
    "CLASSES", "DEFAULT_SLO", "POLICIES", "CarbonTrace", "Layout", "OverheadTable", "ProfileTable",
    "Request", "SimConfig", "SimReport", "SloTable", "baseline", "carbon", "classify", "cost",
    "hierarchical", "load_profile", "net_benefit", "parse_trace", "reshard_plan", "run",
    "select_frequency", "solve_exact", "solve_shards", "synth_trace",
]
