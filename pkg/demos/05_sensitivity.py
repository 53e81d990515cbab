"""
Sensitivity sweeps
==================

Output-length prediction error, number of pools, and load level, each on
the shipped experiment.  Writes sweep CSVs under runs/sensitivity and
takes a few minutes.
"""

from dataclasses import replace
from pathlib import Path

from greenpool.cli import cmd_sweep, load_spec, parse_values
from greenpool.profile_data import data_dir

spec = load_spec(data_dir() / "conversation_1h.ini")
out = Path("runs/sensitivity")
allknobs = replace(spec, policies=("AllKnobs",))
pair = replace(spec, policies=("SinglePool", "AllKnobs"))

print("prediction error")
cmd_sweep(allknobs, "error_rate", [0.0, 0.1, 0.2, 0.3, 0.4], out=out)

print("\npool count")
cmd_sweep(allknobs, "pool_count", [2, 4, 9, 12, 16], out=out)

# Static policies stay provisioned for the highest load in the sweep.
print("\nload level")
cmd_sweep(pair, "load_scale", parse_values("load_scale", "low,med,high"), out=out)
