"""Command-line entry points: ``generate``, ``train`` and ``eval``.

Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
runtime and numeric failures.
"""

from __future__ import annotations

import argparse
import colorsys
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, metrics, synthgen
from .config import ExperimentConfig
from .errors import ConfigError, NumericDomainError, PreconditionError, ShapeError
from .model import PartModel
from .trainer import evaluate, train

log = logging.getLogger("pdisconet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "log.jsonl"

# channel k always gets the same colour; the last entry of a map is background
_BASE_PALETTE = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (145, 30, 180), (245, 130, 48), (70, 240, 240), (240, 50, 230),
)
BACKGROUND_COLOR = (40, 40, 40)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def palette(num_parts: int) -> np.ndarray:
    """``(K+1)×3`` uint8 colours: fixed part colours, then background."""
    cols = list(_BASE_PALETTE[:num_parts])
    for k in range(len(cols), num_parts):
        r, g, b = colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.8, 0.95)
        cols.append((round(r * 255), round(g * 255), round(b * 255)))
    cols.append(BACKGROUND_COLOR)
    return np.array(cols, dtype=np.uint8)


def part_map_image(attention: np.ndarray, image_size: int) -> np.ndarray:
    """Argmax channel per cell, coloured and nearest-neighbour upsampled; returns 3×S×S in [0, 1]."""
    k1, h, w = attention.shape
    assign = attention.argmax(axis=0)
    rows = np.minimum((np.arange(image_size) * h) // image_size, h - 1)
    cols = np.minimum((np.arange(image_size) * w) // image_size, w - 1)
    big = assign[rows[:, None], cols[None, :]]
    return palette(k1 - 1)[big].transpose(2, 0, 1).astype(np.float64) / 255.0


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _split(samples, manifest):
    by_id = {s.sample_id: s for s in samples}
    train_ids = manifest.get("split", {}).get("train") or []
    test_ids = manifest.get("split", {}).get("test") or []
    missing = [i for i in list(train_ids) + list(test_ids) if i not in by_id]
    if missing:
        raise UsageError(f"manifest lists {len(missing)} sample ids with no annotation rows")
    if not train_ids:
        return samples, samples
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids] or samples


def _load_data(path: Path):
    if not (path / "manifest.json").is_file():
        raise UsageError(f"{path} is not a dataset directory (manifest.json missing)")
    samples, manifest = synthgen.load_dataset(path)
    return samples, manifest


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 < args.train_fraction < 1.0:
        raise UsageError("--train-fraction must lie in (0, 1)")
    out = Path(args.out)
    _prepare_out(out, args.force)
    if args.force:
        for stale in (out / "images").glob("*.ppm") if (out / "images").is_dir() else ():
            stale.unlink()
    spec = synthgen.GlyphSpec(image_size=args.image_size, occlude_prob=args.occlude_prob)
    samples = synthgen.generate(args.seed, args.n, spec)
    if args.n >= 2 * spec.num_classes:
        train_s, test_s = synthgen.split(samples, args.train_fraction, args.seed)
        train_ids = sorted(s.sample_id for s in train_s)
        test_ids = sorted(s.sample_id for s in test_s)
    else:
        log.warning("fewer than 2 samples per class: no train/test split written")
        train_ids, test_ids = [], []
    synthgen.save_dataset(out, samples, spec, args.seed, train_ids, test_ids,
                          extra={"train_fraction": args.train_fraction})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.out:
        cfg = cfg.replace(output_dir=str(args.out))
    out = Path(cfg.output_dir)
    samples, manifest = _load_data(Path(args.data))
    train_s, test_s = _split(samples, manifest)
    spec = synthgen.spec_from_dict(manifest["spec"])
    if spec.num_parts != cfg.num_parts:
        log.warning("config asks for K=%d parts but the dataset has %d annotated parts",
                    cfg.num_parts, spec.num_parts)
    if spec.image_size != cfg.image_size:
        log.warning("config image_size %d differs from dataset image size %d", cfg.image_size, spec.image_size)
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.to_text()
    (out / CONFIG_NAME).write_text(text, encoding="utf-8")
    digest = checkpoint.config_digest(text)
    model = PartModel(cfg.model_config(num_classes=spec.num_classes))
    log_path = out / LOG_NAME
    log_path.write_text("")

    def on_epoch(entry, model, opt):
        with open(log_path, "a") as f:
            f.write(json.dumps(entry) + "\n")
        checkpoint.save(out / CHECKPOINT_NAME, model.state_dict(), opt.state if opt else None, digest)

    result = train(model, train_s, cfg.train_config(), test_s, on_epoch)
    if not result.log:
        checkpoint.save(out / CHECKPOINT_NAME, model.state_dict(), None, digest)
    print(f"checkpoint written to {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt.parent / CONFIG_NAME
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    text = config_path.read_text(encoding="utf-8") if config_path.is_file() else None
    if text is None:
        raise UsageError(f"config {config_path} not found")
    cfg = ExperimentConfig.from_text(text, str(config_path))
    params, _, digest = checkpoint.load(ckpt)
    if digest != checkpoint.config_digest(text):
        raise checkpoint.CheckpointError(f"{ckpt} was not trained with {config_path} (config digest mismatch)")
    samples, manifest = _load_data(Path(args.data))
    train_s, test_s = _split(samples, manifest)
    spec = synthgen.spec_from_dict(manifest["spec"])
    model = PartModel(cfg.model_config(num_classes=spec.num_classes))
    model.load_state_dict(params)
    res = evaluate(model, test_s, train_s if len(train_s) >= 2 * cfg.num_parts + 1 else None)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {k: res[k] for k in ("accuracy_pct", "nmi", "ari", "keypoint_error_pct", "per_part_presence_histogram")}
    report["num_test_images"] = len(test_s)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")

    maps = out / "partmaps"
    maps.mkdir(exist_ok=True)
    for s, att in zip(test_s, res["attention"]):
        synthgen.write_ppm(maps / f"{s.sample_id:05d}.ppm", part_map_image(att, s.image.shape[-1]))
    with open(out / "centroids.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "sample_id", "part", "x", "y", "present"])
        tables = [("test", test_s, res["centroids"])]
        if "train_centroids" in res:
            tables.append(("train", train_s, res["train_centroids"]))
        for name, group, cents in tables:
            for s, xy in zip(group, cents):
                for k in range(len(xy)):
                    w.writerow([name, s.sample_id, k, repr(float(xy[k, 0])), repr(float(xy[k, 1])),
                                int(not np.isnan(xy[k, 0]))])
    with open(out / "assignments.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "keypoint", "predicted_part"])
        pred = iter(res["pred_labels"])
        for s in test_s:
            for p in np.nonzero(s.visible)[0]:
                w.writerow([s.sample_id, int(p), int(next(pred))])
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdisconet", description="Part discovery from image-level labels.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic glyph dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True, help="number of images")
    g.add_argument("--out", required=True)
    g.add_argument("--occlude-prob", type=float, default=0.0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", help="key = value config file (defaults if omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and export part maps")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="config the checkpoint was trained with (default: next to it)")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, NumericDomainError, PreconditionError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
