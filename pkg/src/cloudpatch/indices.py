"""Water-quality indices from 8-band imagery.

NDCI defaults to the standard orientation (red_edge - red) / (red_edge + red);
``orientation="printed"`` gives the negated form (red - red_edge) / (red + red_edge).
Daily categories use the lake-mean NDCI: < 0 low, [0, 0.1] moderate_high,
> 0.1 bloom_risk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date
from typing import Sequence

import numpy as np

from .errors import DateMismatch, DimMismatch, EmptyRegion, NonFinite
from .metrics import pearson_of, rmse_of
from .raster import GREEN, RED, RED_EDGE, ImageSeries, MultibandImage

CATEGORIES = ("low", "moderate_high", "bloom_risk")
LOW_BELOW = 0.0
BLOOM_ABOVE = 0.1
MIN_DENOMINATOR = 1e-6


@dataclass(frozen=True, eq=False)
class IndexField:
    values: np.ndarray  # H x W, NaN where undefined or outside the region

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class IndexSeries:
    kind: str
    dates: tuple[date, ...]
    values: tuple[float, ...]
    categories: tuple[str, ...] | None  # NDCI only
    flagged: tuple[date, ...] = ()  # dates dropped for lack of finite cells


def _bands(img: MultibandImage, region: np.ndarray, *numbers: int):
    if img.bands < max(numbers):
        raise DimMismatch(f"need at least {max(numbers)} bands, image has {img.bands}")
    region = np.asarray(region)
    if region.shape != (img.height, img.width):
        raise DimMismatch(f"region {region.shape} vs image {(img.height, img.width)}")
    inside = region == 1
    return inside, [img.data[:, :, n - 1].astype(np.float64) for n in numbers]


def green_red(img: MultibandImage, region: np.ndarray) -> IndexField:
    inside, (green, red) = _bands(img, region, GREEN, RED)
    ok = inside & np.isfinite(green) & np.isfinite(red) & (red >= MIN_DENOMINATOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        return IndexField(np.where(ok, green / red, np.nan))


def ndci(img: MultibandImage, region: np.ndarray, orientation: str = "standard") -> IndexField:
    if orientation not in ("standard", "printed"):
        raise ValueError(f"orientation must be 'standard' or 'printed', got {orientation!r}")
    inside, (red, edge) = _bands(img, region, RED, RED_EDGE)
    den = edge + red
    ok = inside & np.isfinite(red) & np.isfinite(edge) & (den >= MIN_DENOMINATOR)
    num = edge - red if orientation == "standard" else red - edge
    with np.errstate(divide="ignore", invalid="ignore"):
        return IndexField(np.where(ok, num / den, np.nan))


def classify_ndci(value: float) -> str:
    if not math.isfinite(value):
        raise NonFinite(f"cannot classify {value}")
    if value < LOW_BELOW:
        return "low"
    if value > BLOOM_ABOVE:
        return "bloom_risk"
    return "moderate_high"


def index_field(img: MultibandImage, region: np.ndarray, kind: str, orientation: str = "standard") -> IndexField:
    if kind == "ndci":
        return ndci(img, region, orientation)
    if kind == "green_red":
        return green_red(img, region)
    raise ValueError(f"unknown index kind {kind!r}")


def series_mean_index(series: ImageSeries, kind: str = "ndci", orientation: str = "standard") -> IndexSeries:
    """Daily lake-mean index; dates without a finite in-region cell are flagged and dropped."""
    if len(series) == 0:
        raise ValueError("series is empty")
    if not np.any(series.region == 1):
        raise EmptyRegion("lake region has no cells")
    dates, values, flagged = [], [], []
    for img in series.images:
        v = index_field(img, series.region, kind, orientation).values
        finite = v[np.isfinite(v)]
        if finite.size == 0:
            flagged.append(img.date)
            continue
        dates.append(img.date)
        values.append(float(finite.mean()))
    cats = tuple(classify_ndci(v) for v in values) if kind == "ndci" else None
    return IndexSeries(kind, tuple(dates), tuple(values), cats, tuple(flagged))


def category_fractions(categories: Sequence[str]) -> dict[str, float]:
    n = len(categories)
    if n == 0:
        raise ValueError("no categorised days")
    return {c: sum(1 for x in categories if x == c) / n for c in CATEGORIES}


@dataclass(frozen=True)
class SeriesComparison:
    pearson_r: float
    rmse: float
    observed_fractions: dict[str, float] | None
    imputed_fractions: dict[str, float] | None


def compare_series(observed: IndexSeries, imputed: IndexSeries) -> SeriesComparison:
    if observed.dates != imputed.dates:
        raise DateMismatch("observed and imputed index series cover different dates")
    y = np.array(observed.values)
    yhat = np.array(imputed.values)
    fo = category_fractions(observed.categories) if observed.categories is not None else None
    fi = category_fractions(imputed.categories) if imputed.categories is not None else None
    return SeriesComparison(pearson_of(y, yhat), rmse_of(y, yhat), fo, fi)
