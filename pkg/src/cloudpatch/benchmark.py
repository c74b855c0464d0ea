"""Synthetic benchmark: plain CNN against the interpolation baseline.

One seeded scene, one set of 10% masks, ``n_runs`` trainings that differ only
in their seed. Each run is scored on the held-out test dates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .baseline import interpolate_image
from .maskgen import GrfConfig, apply_mask, mask_series
from .metrics import evaluate_model, pooled_rmse
from .models import ModelSpec
from .synth import SceneConfig, generate_scene
from .train import TrainConfig, impute_images, run_once, split_dataset


@dataclass(frozen=True)
class BenchmarkConfig:
    scene: SceneConfig = SceneConfig(seed=1)
    grf: GrfConfig = GrfConfig(seed=100)
    train: TrainConfig = TrainConfig(n_runs=3)
    kind: str = "cnn"

    @property
    def n_runs(self) -> int:
        return self.train.n_runs


@dataclass
class BenchmarkResult:
    seed: int
    band_r: list[float]
    model_rmse: float
    baseline_rmse: float
    epochs: int
    seconds: float
    history: list[float] = field(default_factory=list)

    @property
    def mean_r(self) -> float:
        return float(np.mean(self.band_r))

    @property
    def ratio(self) -> float:
        return self.model_rmse / self.baseline_rmse


def prepare(cfg: BenchmarkConfig):
    series = generate_scene(cfg.scene)
    _, masks = mask_series(series, cfg.grf)
    return series, masks


def run_benchmark(cfg: BenchmarkConfig, run: int, data=None) -> BenchmarkResult:
    """Train run ``run`` (seed ``base_seed + run``) and score it against the baseline."""
    series, masks = data or prepare(cfg)
    spec = ModelSpec.for_kind(cfg.kind, cfg.scene.height, cfg.scene.width)
    seed = cfg.train.base_seed + run
    t0 = time.perf_counter()
    params, record = run_once(spec, series, masks, cfg.train, seed)
    seconds = time.perf_counter() - t0
    test = split_dataset(len(series), cfg.train.base_seed, cfg.train.split)[2]
    truth = [series.images[i] for i in test]
    tmask = [masks[i] for i in test]
    observed = [apply_mask(img, m) for img, m in zip(truth, tmask)]
    model = impute_images(spec, params, observed, tmask)
    base = [interpolate_image(o) for o in observed]
    band_r = [m.pearson_r for m in evaluate_model(truth, model, tmask)]
    return BenchmarkResult(
        seed, band_r, pooled_rmse(truth, model, tmask), pooled_rmse(truth, base, tmask),
        len(record.val_history), seconds, list(record.val_history),
    )
