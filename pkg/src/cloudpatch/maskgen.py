"""Cloud-shaped artificial gaps from thresholded Gaussian random fields.

A field is drawn with exponential covariance ``sigma2 * exp(-|s - s'| / d)``
over pixel centres mapped into the unit square, and the ``ratio`` fraction of
cells with the lowest values becomes the mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateField, DegenerateGrid, DimMismatch
from .raster import CloudMask, ImageSeries, MultibandImage

MAX_COARSE = 64
_SEED_MOD = 2**64


@dataclass(frozen=True)
class GrfConfig:
    variance_sigma2: float = 0.95
    range_d: float = 0.4
    mask_ratio: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not self.variance_sigma2 > 0:
            raise ValueError("variance_sigma2 must be > 0")
        if not 0 < self.range_d <= 2:
            raise ValueError("range_d must lie in (0, 2]")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0 <= self.seed < _SEED_MOD:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class ScalarField:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("field must be a finite 2-D array")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def pixel_centres(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def exponential_covariance(h: int, w: int, sigma2: float, d: float) -> np.ndarray:
    y, x = np.meshgrid(pixel_centres(h), pixel_centres(w), indexing="ij")
    pts = np.stack([y.ravel(), x.ravel()], axis=1)
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    return sigma2 * np.exp(-dist / d)


@lru_cache(maxsize=8)
def _cholesky(h: int, w: int, sigma2: float, d: float) -> np.ndarray:
    cov = exponential_covariance(h, w, sigma2, d)
    cov[np.diag_indices_from(cov)] += 1e-10 * sigma2
    return np.linalg.cholesky(cov)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation weights from an ``n_in`` grid of pixel centres to ``n_out``."""
    if n_out == n_in:
        return np.eye(n_out)
    u = np.clip(pixel_centres(n_out) * n_in - 0.5, 0, n_in - 1)
    lo = np.minimum(np.floor(u).astype(int), n_in - 2)
    frac = u - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, lo] = 1 - frac
    m[rows, lo + 1] += frac
    return m


def sample_grf_batch(
    h: int, w: int, cfg: GrfConfig, n: int, rng: np.random.Generator, coarse: int = MAX_COARSE
) -> np.ndarray:
    """``n`` independent zero-mean draws, shape (n, h, w).

    Exact on a grid of at most ``coarse`` x ``coarse`` nodes, bilinear above that.
    """
    if h < 2 or w < 2:
        raise DegenerateGrid(f"grid {h}x{w} is too small for a field")
    ch, cw = min(h, coarse), min(w, coarse)
    chol = _cholesky(ch, cw, float(cfg.variance_sigma2), float(cfg.range_d))
    z = rng.standard_normal((ch * cw, n))
    nodes = (chol @ z).T.reshape(n, ch, cw)
    if (ch, cw) == (h, w):
        return nodes
    ry, rx = _interp_matrix(h, ch), _interp_matrix(w, cw)
    return np.einsum("ia,nab,jb->nij", ry, nodes, rx)


def sample_grf(h: int, w: int, cfg: GrfConfig) -> ScalarField:
    rng = np.random.default_rng(cfg.seed)
    return ScalarField(sample_grf_batch(h, w, cfg, 1, rng)[0])


def masked_count(ratio: float, n_cells: int) -> int:
    """round(ratio * n_cells), halves rounded up."""
    return int(math.floor(ratio * n_cells + 0.5))


def threshold_mask(field: ScalarField, ratio: float) -> CloudMask:
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    values = field.values.ravel()
    if values.size == 0:
        raise DegenerateField("empty field")
    k = masked_count(ratio, values.size)
    if k == 0:
        raise DegenerateField(f"ratio {ratio} masks no cell of a {field.height}x{field.width} field")
    # stable sort: ties go to the lower row-major index
    order = np.argsort(values, kind="stable")
    cells = np.zeros(values.size, np.uint8)
    cells[order[:k]] = 1
    return CloudMask(cells.reshape(field.values.shape))


def apply_mask(target: MultibandImage, mask: CloudMask) -> MultibandImage:
    if target.data.shape[:2] != mask.cells.shape:
        raise DimMismatch(f"image {target.data.shape[:2]} vs mask {mask.cells.shape}")
    out = np.where(mask.cells[:, :, None] == 1, np.float32(np.nan), target.data)
    return target.with_data(out)


def generate_mask(h: int, w: int, cfg: GrfConfig) -> CloudMask:
    return threshold_mask(sample_grf(h, w, cfg), cfg.mask_ratio)


def mask_series(series: ImageSeries, cfg: GrfConfig) -> tuple[ImageSeries, list[CloudMask]]:
    if len(series) == 0:
        raise ValueError("series is empty")
    masks, masked = [], []
    for i, img in enumerate(series.images):
        sub = GrfConfig(cfg.variance_sigma2, cfg.range_d, cfg.mask_ratio, (cfg.seed + i) % _SEED_MOD)
        m = generate_mask(img.height, img.width, sub)
        masks.append(m)
        masked.append(apply_mask(img, m))
    return series.replace_images(masked), masks
