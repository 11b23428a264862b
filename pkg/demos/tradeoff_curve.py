"""
Speed/accuracy trade-off from the command line
==============================================

Drives the ``blockdiff`` command the way a user would: train the desk-scale
baseline and on-policy checkpoints from the shipped configs, sweep the
promotion threshold for each decoder, and print the ablation grid. Training
takes a few minutes on one core; pass an existing output directory to reuse
checkpoints.

    python demos/tradeoff_curve.py [workdir]
"""

#%%
import os
import sys
from pathlib import Path

from blockdiff.cli import main

root = Path(__file__).resolve().parent.parent / "configs"
work = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run")
work.mkdir(exist_ok=True)
os.chdir(work)


def run(*args):
    print("$ blockdiff", " ".join(map(str, args)))
    rc = main([str(a) for a in args])
    if rc:
        sys.exit(rc)


#%%
# Step 1. Baseline and on-policy checkpoints
# ------------------------------------------
if not Path("mdlm.ckpt").exists():
    run("train", "--config", root / "desk_mdlm.yaml", "--checkpoint", "mdlm.ckpt", "--log", "mdlm.jsonl")
if not Path("oput.ckpt").exists():
    run("train", "--config", root / "desk_oput.yaml", "--init-checkpoint", "mdlm.ckpt",
        "--checkpoint", "oput.ckpt", "--log", "oput.jsonl")

#%%
# Step 2. Threshold sweeps
# ------------------------
# One-way decoding on the baseline, then the revising decoder on the
# on-policy checkpoint. Lower thresholds promote more positions per forward.
taus = "0.95,0.9,0.8,0.7,0.5,0.3,0.0"
run("sweep", "--checkpoint", "mdlm.ckpt", "--decoder", "threshold-baseline", "--thresholds", taus,
    "--n", 100, "--timing", "false", "--out", "curve_threshold.tsv")
run("sweep", "--checkpoint", "oput.ckpt", "--decoder", "spd", "--thresholds", taus,
    "--n", 100, "--timing", "false", "--out", "curve_spd.tsv")

#%%
# Step 3. Training x decoding ablation
# ------------------------------------
run("ablate", "--baseline-checkpoint", "mdlm.ckpt", "--oput-checkpoint", "oput.ckpt", "--n", 100,
    "--timing", "false", "--out", "ablation")
