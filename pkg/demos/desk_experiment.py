#!/usr/bin/env python
"""Train on PartGlyphs and look at what the parts latch onto.

    python demos/desk_experiment.py            # default recipe, about 10 minutes on one core
    python demos/desk_experiment.py --quick    # small data and two epochs, under a minute
    python demos/desk_experiment.py --out runs/demo   # also write colour-coded part maps
"""
import argparse
from pathlib import Path

import numpy as np

from pdisconet import metrics, synthgen
from pdisconet.cli import palette, part_map_image
from pdisconet.config import ExperimentConfig
from pdisconet.experiment import run
from pdisconet.trainer import predict

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true")
parser.add_argument("--out", type=Path)
args = parser.parse_args()

cfg = ExperimentConfig()
if args.quick:
    cfg = cfg.replace(num_samples=320, epochs=2, pretrain_epochs=1, eval_size=64)


def show(entry, model, opt):
    loss = ", ".join(f"{k} {v:.4g}" for k, v in entry["loss"].items())
    line = f"epoch {entry['epoch']:2d} [{entry['phase']}] {loss}"
    if "eval" in entry:
        e = entry["eval"]
        line += f" | acc {e['accuracy_pct']:.1f}% NMI {e['nmi']:.3f} ARI {e['ari']:.3f}"
    print(line, flush=True)


res = run(cfg, show)
m = res.metrics
print(f"\nfinished in {res.seconds / 60:.1f} min")
print(f"test accuracy {m['accuracy_pct']:.1f}%, NMI {m['nmi']:.3f}, ARI {m['ari']:.3f}, "
      f"keypoint error {m['keypoint_error_pct']:.2f}% of the diagonal")
print("images in which each part is present:", m["per_part_presence_histogram"])

# which ground-truth part does each discovered part sit on?
spec = cfg.glyph_spec()
samples = synthgen.generate(cfg.data_seed, cfg.num_samples, spec)
_, test = synthgen.split(samples, cfg.train_fraction, cfg.data_seed)
test = test[:200]
images, _, keypoints, visible = synthgen.stack(test)
att, _ = predict(res.training.model, images)
gt = np.concatenate([np.nonzero(v)[0] for v in visible])
pred = np.concatenate([metrics.assign_keypoints(a, kp[v]) for a, kp, v in zip(att, keypoints, visible)])
table = np.zeros((spec.num_parts, cfg.num_parts + 1), dtype=int)
np.add.at(table, (gt, pred), 1)
print("\nrows: ground-truth part, columns: discovered part (last = background)")
print(table)

if args.out:
    args.out.mkdir(parents=True, exist_ok=True)
    for s, a in zip(test[:16], att):
        synthgen.write_ppm(args.out / f"{s.sample_id:05d}_image.ppm", s.image)
        synthgen.write_ppm(args.out / f"{s.sample_id:05d}_parts.ppm", part_map_image(a, s.image.shape[-1]))
    print(f"\nwrote 16 image/part-map pairs to {args.out}; palette {palette(cfg.num_parts).tolist()}")
