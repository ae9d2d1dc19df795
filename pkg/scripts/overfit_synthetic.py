#!/usr/bin/env python3
"""End-to-end desk-scale experiment: generate synthetic tracklets, train the
side-tuned model, evaluate, and render one attention heatmap.

Usage:
    python scripts/overfit_synthetic.py --out runs/overfit --steps 200
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vidattr import bundled_schema_path
from vidattr.cli import dispatch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/overfit", help="experiment directory")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--num", type=int, default=32, help="synthetic tracklets")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    schema = bundled_schema_path("synthetic_small")

    rc = dispatch(["synth-data", "--out", str(data), "--num", str(args.num),
                   "--seed", str(args.seed), "--schema", str(schema), "--test-fraction", "0.25"])
    if rc:
        return rc

    cfg = out / "run.toml"
    cfg.write_text(f"""\
mode = "side"
[schema]
path = "{schema}"
[data]
manifest = "{data / 'manifest.jsonl'}"
[backbone.vision]
width = 32
depth = 4
heads = 2
patch = 16
tap_layers = [0, 1, 2, 3]
image_size = [32, 32]
[backbone.text]
width = 32
depth = 2
heads = 2
vocab = 258
[side_net]
width = 16
heads = 2
depth = 8
fusion_points = [0, 2, 4, 6]
max_frames = 8
[fusion]
layers = 1
width = 16
heads = 2
[preprocess]
height = 32
width = 32
[train]
lr = 0.001
batch_size = 16
steps = {args.steps}
seed = 0
deterministic = true
frames_per_sample = 6
""")

    exp = out / "exp"
    rc = dispatch(["train", "--config", str(cfg), "--out", str(exp)])
    if rc:
        return rc
    rc = dispatch(["eval", "--checkpoint", str(exp / "ckpt"), "--out", str(exp / "eval"), "--split", "test"])
    if rc:
        return rc
    return dispatch(["explain", "--checkpoint", str(exp / "ckpt"), "--tracklet", "synth0000",
                     "--attribute", "motion left", "--out", str(exp / "explain")])


if __name__ == "__main__":
    sys.exit(main())
