"""RMSE and Pearson R over artificially masked cells, and the CSV report."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConstantSeries, DimMismatch, EmptyMask
from .raster import CloudMask, MultibandImage, atomic_write_bytes

REPORT_COLUMNS = ("model", "band", "rmse_mean", "rmse_std", "r_mean", "r_std", "n_runs")


@dataclass(frozen=True)
class BandMetrics:
    band: int  # 1-based
    rmse: float
    pearson_r: float
    n_pixels: int


def _pairs(observed: MultibandImage, imputed: MultibandImage, mask: CloudMask, band: int):
    if observed.data.shape != imputed.data.shape or observed.data.shape[:2] != mask.cells.shape:
        raise DimMismatch(f"observed {observed.data.shape}, imputed {imputed.data.shape}, mask {mask.cells.shape}")
    y = observed.data[:, :, band - 1].astype(np.float64)
    yhat = imputed.data[:, :, band - 1].astype(np.float64)
    sel = (mask.cells == 1) & np.isfinite(y)
    return y[sel], yhat[sel]


def rmse_of(y: np.ndarray, yhat: np.ndarray) -> float:
    if y.size == 0:
        raise EmptyMask("no masked cell with a finite observation")
    return math.sqrt(float(np.mean((y - yhat) ** 2)))


def pearson_of(y: np.ndarray, yhat: np.ndarray) -> float:
    if y.size == 0:
        raise EmptyMask("no masked cell with a finite observation")
    if y.size < 2:
        raise ConstantSeries("Pearson R needs at least two cells")
    dy, dp = y - y.mean(), yhat - yhat.mean()
    sy, sp = float(np.sum(dy * dy)), float(np.sum(dp * dp))
    if sy == 0 or sp == 0:
        raise ConstantSeries("zero variance in one of the series")
    r = float(np.sum(dy * dp)) / math.sqrt(sy * sp)
    return max(-1.0, min(1.0, r))


def rmse(observed: MultibandImage, imputed: MultibandImage, mask: CloudMask, band: int) -> float:
    return rmse_of(*_pairs(observed, imputed, mask, band))


def pearson_r(observed: MultibandImage, imputed: MultibandImage, mask: CloudMask, band: int) -> float:
    return pearson_of(*_pairs(observed, imputed, mask, band))


def pooled_pairs(observed: Sequence[MultibandImage], imputed: Sequence[MultibandImage], masks: Sequence[CloudMask], band: int):
    if not (len(observed) == len(imputed) == len(masks)):
        raise DimMismatch("observed, imputed and masks must be aligned")
    ys, ps = zip(*(_pairs(o, i, m, band) for o, i, m in zip(observed, imputed, masks)))
    return np.concatenate(ys), np.concatenate(ps)


def evaluate_model(
    observed: Sequence[MultibandImage], imputed: Sequence[MultibandImage], masks: Sequence[CloudMask]
) -> list[BandMetrics]:
    """Per-band metrics pooled over the masked cells of every image."""
    if not observed:
        raise EmptyMask("nothing to evaluate")
    out = []
    for band in range(1, observed[0].bands + 1):
        y, yhat = pooled_pairs(observed, imputed, masks, band)
        out.append(BandMetrics(band, rmse_of(y, yhat), pearson_of(y, yhat), int(y.size)))
    return out


def pooled_rmse(observed: Sequence[MultibandImage], imputed: Sequence[MultibandImage], masks: Sequence[CloudMask]) -> float:
    """RMSE over every masked finite cell of every band at once."""
    parts = [pooled_pairs(observed, imputed, masks, b) for b in range(1, observed[0].bands + 1)]
    return rmse_of(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))  # shortest round-trip form, locale independent


def summarize_runs(runs: Sequence[Sequence[BandMetrics]]) -> list[dict]:
    """Mean and (population) standard deviation per band across runs."""
    rows = []
    for k in range(len(runs[0])):
        rm = np.array([r[k].rmse for r in runs])
        rr = np.array([r[k].pearson_r for r in runs])
        rows.append(
            {
                "band": runs[0][k].band,
                "rmse_mean": float(np.mean(rm)),
                "rmse_std": float(np.std(rm)),
                "r_mean": float(np.mean(rr)),
                "r_std": float(np.std(rr)),
                "n_runs": len(runs),
            }
        )
    return rows


def render_report(metrics_by_model: Mapping[str, Sequence[Sequence[BandMetrics]]]) -> str:
    if not metrics_by_model:
        raise ValueError("report needs at least one model")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for model in sorted(metrics_by_model):
        for row in summarize_runs(metrics_by_model[model]):
            w.writerow(
                [model, row["band"], _fmt(row["rmse_mean"]), _fmt(row["rmse_std"]), _fmt(row["r_mean"]), _fmt(row["r_std"]), row["n_runs"]]
            )
    return buf.getvalue()


def write_report(metrics_by_model: Mapping[str, Sequence[Sequence[BandMetrics]]], path: str | os.PathLike) -> None:
    """``metrics_by_model`` maps a model name to one list of BandMetrics per run."""
    atomic_write_bytes(path, render_report(metrics_by_model).encode("utf-8"))


def read_report(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["band"] = int(r["band"])
        r["n_runs"] = int(r["n_runs"])
        for k in ("rmse_mean", "rmse_std", "r_mean", "r_std"):
            r[k] = float(r[k])
    return rows
