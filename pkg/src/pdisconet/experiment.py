"""One-call desk experiment: render data, train, score."""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import synthgen
from .config import ExperimentConfig
from .model import PartModel
from .trainer import TrainResult, evaluate, train


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: dict
    training: TrainResult
    seconds: float


def run(cfg: ExperimentConfig, on_epoch=None) -> ExperimentResult:
    """Generate the dataset described by ``cfg``, train on its train split and evaluate on the test split."""
    t0 = time.perf_counter()
    spec = cfg.glyph_spec()
    samples = synthgen.generate(cfg.data_seed, cfg.num_samples, spec)
    train_s, test_s = synthgen.split(samples, cfg.train_fraction, cfg.data_seed)
    model = PartModel(cfg.model_config(spec.num_classes))
    result = train(model, train_s, cfg.train_config(), test_s, on_epoch)
    res = evaluate(model, test_s, train_s)
    keep = ("accuracy_pct", "nmi", "ari", "keypoint_error_pct", "per_part_presence_histogram")
    return ExperimentResult(cfg, {k: res[k] for k in keep}, result, time.perf_counter() - t0)
