"""Per-band linear interpolation baseline.

Each gap gets a row estimate and a column estimate (linear between the nearest
finite neighbours, constant beyond the last one) and the fill is their mean.
Cells whose row and column are both entirely missing take the band's finite mean.
"""
from __future__ import annotations

import numpy as np

from .errors import AllMissing
from .raster import MultibandImage


def _axis_estimates(band: np.ndarray) -> np.ndarray:
    """Row-wise interpolation; NaN on rows without any finite value."""
    out = np.full(band.shape, np.nan)
    idx = np.arange(band.shape[1])
    for r, row in enumerate(band):
        ok = np.isfinite(row)
        if ok.any():
            out[r] = np.interp(idx, idx[ok], row[ok])
    return out


def interpolate_band(band: np.ndarray) -> np.ndarray:
    band = np.asarray(band)
    finite = np.isfinite(band)
    if not finite.any():
        raise AllMissing()
    if finite.all():
        return band.copy()
    work = band.astype(np.float64)
    by_row = _axis_estimates(work)
    by_col = _axis_estimates(work.T).T
    est = np.stack([by_row, by_col])
    n = np.isfinite(est).sum(axis=0)
    fill = np.where(n > 0, np.nansum(est, axis=0) / np.maximum(n, 1), work[finite].mean())
    return np.where(finite, band, fill.astype(band.dtype))


def interpolate_image(x: MultibandImage) -> MultibandImage:
    out = np.empty_like(x.data)
    for c in range(x.bands):
        try:
            out[:, :, c] = interpolate_band(x.data[:, :, c])
        except AllMissing:
            raise AllMissing(c + 1) from None
    return x.with_data(out)
