"""Dataset splitting, training with early stopping, inference, and repeated runs."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DivergedLoss, EmptyMask, TooFewImages
from .maskgen import apply_mask
from .metrics import BandMetrics, evaluate_model, summarize_runs
from .models import (
    ModelParams,
    ModelSpec,
    backward,
    build_model,
    copy_params,
    flatten_params,
    forward,
    prepare_input,
    unflatten_params,
)
from .raster import CloudMask, ImageSeries, MultibandImage, composite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 50
    lr: float = 0.001
    batch_size: int = 4
    early_stop_patience: int = 5
    n_runs: int = 30
    split: tuple[float, float, float] = (0.55, 0.25, 0.20)
    base_seed: int = 0
    augment: bool = False  # random flips / quarter turns of each training batch

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f < 0 for f in self.split):
            raise ValueError(f"split fractions {self.split} must be non-negative and sum to 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("max_epochs, batch_size and lr must be positive")


@dataclass
class RunRecord:
    seed: int
    train_history: list[float] = field(default_factory=list)
    val_history: list[float] = field(default_factory=list)
    best_epoch: int = 0
    test_metrics: list[BandMetrics] = field(default_factory=list)
    diverged: str | None = None

    @property
    def best_val(self) -> float:
        return min(self.val_history) if self.val_history else math.inf


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, fractions=(0.55, 0.25, 0.20)) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(n: int, seed: int, fractions=(0.55, 0.25, 0.20), min_images: int = 5):
    """Random partition of ``range(n)`` into train/val/test, each returned sorted."""
    if n < min_images:
        raise TooFewImages(f"{n} images; at least {min_images} required")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_sizes(n, fractions)
    return sorted(perm[:a].tolist()), sorted(perm[a:a + b].tolist()), sorted(perm[a + b:].tolist())


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class Samples:
    """Model inputs, targets and loss masks for a list of images.

    Spatial kinds: x (N,H,W,9), y (N,H,W,8), vm (N,H,W,1).
    Temporal kinds: the same with a time axis of length 5 after N.
    """

    x: np.ndarray
    y: np.ndarray
    vm: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> Samples:
        return Samples(self.x[idx], self.y[idx], self.vm[idx])


def image_arrays(images: Sequence[MultibandImage], masks: Sequence[CloudMask]):
    x = np.stack([prepare_input(apply_mask(img, m), m) for img, m in zip(images, masks)])
    y = np.stack([img.data for img in images])
    vm = np.stack([m.cells[:, :, None].astype(np.float32) for m in masks])
    return x, y, vm


def window_starts(n: int, steps: int) -> list[int]:
    return list(range(n - steps + 1))


def make_samples(spec: ModelSpec, images: Sequence[MultibandImage], masks: Sequence[CloudMask]) -> Samples:
    x, y, vm = image_arrays(images, masks)
    if not spec.temporal:
        return Samples(x, y, vm)
    t = spec.timesteps
    starts = window_starts(len(images), t)
    if not starts:
        raise TooFewImages(f"{len(images)} images cannot form a {t}-step window")
    win = lambda a: np.stack([a[s:s + t] for s in starts])  # noqa: E731
    return Samples(win(x), win(y), win(vm))


def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flips/rotations of the two spatial axes just before channels."""
    ax = (a.ndim - 3, a.ndim - 2)
    if k >= 4:
        a = np.flip(a, axis=ax[1])
    return np.ascontiguousarray(np.rot90(a, k % 4, axes=ax))


def augment_batch(batch: Samples, rng: np.random.Generator) -> Samples:
    square = batch.x.shape[-3] == batch.x.shape[-2]
    k = int(rng.integers(8)) if square else 2 * int(rng.integers(4))  # quarter turns only when square
    return Samples(dihedral(batch.x, k), dihedral(batch.y, k), dihedral(batch.vm, k))


def _loss(y, pred, vm) -> tuple[float, np.ndarray]:
    return T.masked_mse(y, pred, vm)


def evaluate_loss(spec: ModelSpec, params: ModelParams, samples: Samples, batch_size: int = 8) -> float:
    """Masked MSE pooled over every sample, inference mode."""
    total, count = 0.0, 0
    for s in range(0, len(samples), batch_size):
        b = samples.take(slice(s, s + batch_size))
        pred = forward(spec, params, b.x, training=False)
        sel = (np.broadcast_to(b.vm, b.y.shape) == 1) & np.isfinite(b.y)
        d = np.where(sel, pred.astype(np.float64) - np.where(sel, b.y, 0), 0.0)
        total += float(np.sum(d * d))
        count += int(sel.sum())
    if count == 0:
        raise EmptyMask("no masked position with a finite target")
    return total / count


# ---------------------------------------------------------------------------
# training


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.wait = val_loss, epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience

    @property
    def improved(self) -> bool:
        return self.wait == 0


def train_step(spec: ModelSpec, params: ModelParams, state: T.AdamState, batch: Samples, rng: np.random.Generator):
    tape: list = []
    pred = forward(spec, params, batch.x, training=True, seed=rng, tape=tape)
    loss, grad = _loss(batch.y, pred, batch.vm)
    if not math.isfinite(loss):
        raise DivergedLoss(f"non-finite training loss {loss}")
    grads = backward(spec, params, tape, grad)
    flat, state = T.adam_step(flatten_params(params), grads, state)
    return unflatten_params(flat, params), state, loss


def train_model(
    spec: ModelSpec,
    train: Samples,
    val: Samples,
    cfg: TrainConfig,
    seed: int,
) -> tuple[ModelParams, RunRecord]:
    """Adam on masked MSE with early stopping; returns the best-validation parameters."""
    for name, s in (("training", train), ("validation", val)):
        if len(s) == 0:
            raise EmptyMask(f"{name} set is empty")
        per_sample = (np.broadcast_to(s.vm, s.y.shape) == 1) & np.isfinite(s.y)
        if not per_sample.reshape(len(s), -1).any(axis=1).all():
            raise EmptyMask(f"every {name} sample needs a non-empty artificial mask")
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    params = build_model(spec, int(init_ss.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_ss)
    state = T.AdamState(lr=cfg.lr)
    record = RunRecord(seed)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best = copy_params(params)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        losses, weights = [], []
        try:
            for s in range(0, len(train), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                batch = train.take(idx)
                if cfg.augment:
                    batch = augment_batch(batch, rng)
                params, state, loss = train_step(spec, params, state, batch, rng)
                losses.append(loss)
                weights.append(len(idx))
            val_loss = evaluate_loss(spec, params, val)
            if not math.isfinite(val_loss):
                raise DivergedLoss(f"non-finite validation loss {val_loss}")
        except DivergedLoss as exc:
            record.diverged = f"epoch {epoch}: {exc}"
            raise DivergedLoss(f"run seed={seed} diverged at epoch {epoch}: {exc}") from exc
        record.train_history.append(float(np.average(losses, weights=weights)))
        record.val_history.append(val_loss)
        stop = stopper.update(epoch, val_loss)
        if stopper.improved:
            best = copy_params(params)
        log.debug("seed %d epoch %d train %.6g val %.6g", seed, epoch, record.train_history[-1], val_loss)
        if stop:
            break
    record.best_epoch = stopper.best_epoch
    return best, record


def overfit(spec: ModelSpec, samples: Samples, steps: int, lr: float = 0.001, seed: int = 0):
    """Train on one fixed batch; returns (params, inference-mode losses before and after every step)."""
    params = build_model(spec, seed)
    rng = np.random.default_rng(seed)
    state = T.AdamState(lr=lr)
    history = [evaluate_loss(spec, params, samples)]
    for _ in range(steps):
        params, state, _ = train_step(spec, params, state, samples, rng)
        history.append(evaluate_loss(spec, params, samples))
    return params, history


# ---------------------------------------------------------------------------
# inference


def predict(spec: ModelSpec, params: ModelParams, inputs: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Predictions (N,H,W,8) for per-image inputs (N,H,W,9).

    Temporal kinds run every 5-image window and average the predictions each
    image receives.
    """
    if not spec.temporal:
        return np.concatenate(
            [forward(spec, params, inputs[s:s + batch_size]) for s in range(0, len(inputs), batch_size)]
        )
    t = spec.timesteps
    starts = window_starts(len(inputs), t)
    if not starts:
        raise TooFewImages(f"{len(inputs)} images cannot form a {t}-step window")
    acc = np.zeros(inputs.shape[:3] + (8,), np.float64)
    hits = np.zeros(len(inputs))
    for s in range(0, len(starts), batch_size):
        chunk = starts[s:s + batch_size]
        pred = forward(spec, params, np.stack([inputs[a:a + t] for a in chunk]))
        for p, a in zip(pred, chunk):
            acc[a:a + t] += p
            hits[a:a + t] += 1
    return (acc / hits[:, None, None, None]).astype(np.float32)


def gap_mask(img: MultibandImage, mask: CloudMask | None) -> CloudMask:
    gap = np.any(np.isnan(img.data), axis=2)
    if mask is not None:
        gap |= mask.cells == 1
    return CloudMask(gap.astype(np.uint8))


def impute_images(
    spec: ModelSpec, params: ModelParams, observed: Sequence[MultibandImage], masks: Sequence[CloudMask | None]
) -> list[MultibandImage]:
    """Fill every gap (artificial mask or NaN) of ``observed`` with model output.

    Predictions are clamped at zero reflectance before compositing.
    """
    gaps = [gap_mask(o, m) for o, m in zip(observed, masks)]
    inputs = np.stack([prepare_input(o, g) for o, g in zip(observed, gaps)])
    pred = np.maximum(predict(spec, params, inputs), 0)
    return [composite(o, o.with_data(p), g) for o, p, g in zip(observed, pred, gaps)]


def score_images(spec, params, images: Sequence[MultibandImage], masks: Sequence[CloudMask]) -> list[BandMetrics]:
    observed = [apply_mask(img, m) for img, m in zip(images, masks)]
    return evaluate_model(images, impute_images(spec, params, observed, masks), masks)


# ---------------------------------------------------------------------------
# repeated runs


@dataclass
class MultiRunResult:
    records: list[RunRecord]
    summary: list[dict]  # per band: rmse_mean, rmse_std, r_mean, r_std, n_runs
    n_diverged: int
    first_params: ModelParams | None = None  # parameters of the base_seed run, if it converged


def run_once(spec: ModelSpec, series: ImageSeries, masks: Sequence[CloudMask], cfg: TrainConfig, seed: int, split=None):
    """Split (by ``cfg.base_seed``), train with ``seed`` and score on the test images."""
    min_images = 5 + spec.timesteps if spec.temporal else 5
    tr, va, te = split or split_dataset(len(series), cfg.base_seed, cfg.split, min_images)
    imgs = series.images
    pick = lambda idx: ([imgs[i] for i in idx], [masks[i] for i in idx])  # noqa: E731
    train = make_samples(spec, *pick(tr))
    val = make_samples(spec, *pick(va))
    params, record = train_model(spec, train, val, cfg, seed)
    record.test_metrics = score_images(spec, params, *pick(te))
    return params, record


def _run_worker(args):
    spec, series, masks, cfg, seed, split, keep = args
    try:
        params, record = run_once(spec, series, masks, cfg, seed, split)
        return record, params if keep else None
    except DivergedLoss as exc:
        return RunRecord(seed, diverged=str(exc)), None


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CLOUDPATCH_THREADS", "1")))
    except ValueError:
        return 1


def multi_run(
    spec: ModelSpec, series: ImageSeries, masks: Sequence[CloudMask], cfg: TrainConfig, split=None, workers: int | None = None
) -> MultiRunResult:
    """Run ``cfg.n_runs`` trainings with seeds base_seed + i and aggregate test metrics."""
    jobs = [(spec, series, list(masks), cfg, cfg.base_seed + i, split, i == 0) for i in range(cfg.n_runs)]
    workers = max_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_run_worker, jobs))
    else:
        results = [_run_worker(j) for j in jobs]
    records = [r for r, _ in results]
    ok = [r for r in records if r.diverged is None]
    n_div = len(records) - len(ok)
    if n_div:
        log.warning("%d of %d runs diverged and are excluded from the aggregate", n_div, len(records))
    summary = summarize_runs([r.test_metrics for r in ok]) if ok else []
    return MultiRunResult(records, summary, n_div, results[0][1])
