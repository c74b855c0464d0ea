"""Deterministic synthetic lake scenes.

An elliptical lake sits in a land background. Each band's base reflectance is a
smooth random field (GRF, range 0.8) mapped into a plausible water or land
range. Every date multiplies all bands by a common brightness factor, adds a
seasonal bloom patch that drifts across the lake, then adds Gaussian noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .errors import BadConfig
from .maskgen import GrfConfig, sample_grf_batch
from .raster import N_BANDS, ImageSeries, MultibandImage

# coastal blue, blue, green I, green, yellow, red, red edge, NIR
WATER_MEAN = np.array([0.030, 0.034, 0.042, 0.046, 0.038, 0.030, 0.026, 0.016])
WATER_SD = np.array([0.006, 0.006, 0.007, 0.008, 0.007, 0.006, 0.005, 0.004])
LAND_MEAN = np.array([0.080, 0.090, 0.100, 0.110, 0.120, 0.130, 0.200, 0.300])
LAND_SD = np.array([0.015, 0.016, 0.018, 0.020, 0.022, 0.024, 0.030, 0.040])
# reflectance change per unit bloom intensity
BLOOM_RESPONSE = np.array([-0.20, -0.10, 0.40, 0.60, 0.30, -0.10, 1.00, 0.50])

SMOOTH_RANGE = 0.8
SMOOTH_NODES = 8  # base fields are drawn on an 8x8 grid and interpolated: low-frequency, no pixel-scale roughness
SPECTRAL_SHARE = 0.6  # fraction of base variance shared by all bands
START_DATE = date(2021, 1, 1)
DATE_STEP_DAYS = 3


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_dates: int = 60
    seed: int = 0
    bloom_amplitude: float = 0.03
    noise_sd: float = 0.01

    def validate(self) -> None:
        if self.height < 4 or self.width < 4 or self.height % 4 or self.width % 4:
            raise BadConfig(f"scene {self.height}x{self.width} must be >= 4 and divisible by 4")
        if self.n_dates < 6:
            raise BadConfig("n_dates must be >= 6")
        if self.bloom_amplitude < 0 or self.noise_sd < 0:
            raise BadConfig("bloom_amplitude and noise_sd must be >= 0")
        if self.seed < 0:
            raise BadConfig("seed must be non-negative")


@dataclass(frozen=True, eq=False)
class SceneParts:
    """Noise-free components, kept for tests and diagnostics."""

    region: np.ndarray
    base: np.ndarray  # H x W x 8
    patch_centres: np.ndarray  # n_dates x 2
    bloom_curve: np.ndarray  # n_dates
    brightness: np.ndarray  # n_dates


def lake_region(h: int, w: int) -> np.ndarray:
    y, x = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    ang = np.deg2rad(25.0)
    dy, dx = y - 0.5, x - 0.48
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    return ((u / 0.36) ** 2 + (v / 0.26) ** 2 <= 1.0).astype(np.uint8)


def _base_fields(cfg: SceneConfig, region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    grf = GrfConfig(variance_sigma2=1.0, range_d=SMOOTH_RANGE, mask_ratio=0.1)
    fields = sample_grf_batch(cfg.height, cfg.width, grf, N_BANDS + 2, rng, coarse=SMOOTH_NODES)
    water_common, land_common, own = fields[0], fields[1], fields[2:]
    a, b = np.sqrt(SPECTRAL_SHARE), np.sqrt(1 - SPECTRAL_SHARE)
    water = WATER_MEAN + WATER_SD * (a * water_common[..., None] + b * np.moveaxis(own, 0, -1))
    land = LAND_MEAN + LAND_SD * (a * land_common[..., None] + b * np.moveaxis(own, 0, -1))
    return np.where(region[..., None] == 1, water, land)


def bloom_curve(n: int) -> np.ndarray:
    t = np.arange(n)
    return np.exp(-0.5 * ((t - 0.6 * n) / (0.12 * n)) ** 2)


def scene_parts(cfg: SceneConfig) -> SceneParts:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    region = lake_region(cfg.height, cfg.width)
    base = _base_fields(cfg, region, rng)
    frac = np.linspace(0.0, 1.0, cfg.n_dates)[:, None]
    centres = np.array([0.38, 0.36]) + frac * np.array([0.22, 0.26])
    t = np.arange(cfg.n_dates)
    seasonal = 1.0 + 0.15 * np.sin(2 * np.pi * t / cfg.n_dates * 2)
    jitter = np.array([np.random.default_rng(_date_seed(cfg.seed, k)).normal(0, 0.05) for k in range(cfg.n_dates)])
    return SceneParts(region, base, centres, bloom_curve(cfg.n_dates), seasonal + jitter)


def _date_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 1, k])


def render_date(cfg: SceneConfig, parts: SceneParts, k: int, noise: bool = True) -> np.ndarray:
    h, w = cfg.height, cfg.width
    y, x = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    cy, cx = parts.patch_centres[k]
    patch = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * 0.15**2)) * parts.region
    bloom = cfg.bloom_amplitude * parts.bloom_curve[k] * patch
    img = parts.brightness[k] * (parts.base + bloom[..., None] * BLOOM_RESPONSE)
    if noise and cfg.noise_sd > 0:
        rng = np.random.default_rng(_date_seed(cfg.seed, k))
        rng.normal(0, 0.05)  # consumed by the brightness jitter
        img = img + rng.normal(0.0, cfg.noise_sd, size=img.shape)
    return np.maximum(img, 0.0).astype(np.float32)


def generate_scene(cfg: SceneConfig = SceneConfig()) -> ImageSeries:
    parts = scene_parts(cfg)
    images = [
        MultibandImage(render_date(cfg, parts, k), START_DATE + timedelta(days=DATE_STEP_DAYS * k))
        for k in range(cfg.n_dates)
    ]
    return ImageSeries(tuple(images), parts.region)
