"""
The command-line pipeline
=========================

synth -> prepare -> train -> eval, all driven by one JSON config. Outputs land
under $CDANET_OUT; a rerun with the same config and seed reproduces every
checkpoint and metrics byte.
"""
import json
import os
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(tempfile.mkdtemp())
config = {
    "data": {"synth": {"n_users": 600, "n_items_source": 240, "n_items_target": 120,
                       "n_source": 30_000, "n_target": 8000, "seed": 4}},
    "train": {"d": 16, "tower_width": 16, "epochs": 8, "lr": 3e-3, "patience": 2},
    "eval": {"ratios": [0.5, 1.0], "seeds": [0], "k": 5},
}
(work / "config.json").write_text(json.dumps(config, indent=2))
env = {**os.environ, "CDANET_OUT": str(work / "out")}


def cdanet(*args):
    proc = subprocess.run([sys.executable, "-m", "cdanet.cli", *args,
                           "--config", str(work / "config.json")],
                          env=env, capture_output=True, text=True)
    print(f"$ cdanet {' '.join(args)}  -> exit {proc.returncode}")
    print("  " + (proc.stdout.strip() or proc.stderr.strip().splitlines()[-1]).replace("\n", "\n  "))
    return proc.returncode


cdanet("prepare")
cdanet("train", "--stage", "augmentation")     # exit 2: stage one has not run
cdanet("train", "--stage", "full", "--seed", "7")
cdanet("train", "--stage", "baseline:mlp", "--seed", "7")
cdanet("eval", "--suite", "test", "--seed", "7")
cdanet("eval", "--suite", "probe", "--seed", "7")
cdanet("eval", "--suite", "sweep", "--seed", "7")

run = next((work / "out").glob("*-s7"))
print("run directory:", sorted(p.name for p in run.iterdir()))
