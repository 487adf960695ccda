"""Training-time point-cloud augmentations."""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import PointCloud

MODES = ("none", "rotation", "jitter", "anisotropic_scaling", "translation", "all")


@dataclass(frozen=True)
class AugmentConfig:
    mode: str = "none"
    seed: int = 0
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    scale_range: Tuple[float, float] = (0.8, 1.25)
    translate_range: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}; choose from {MODES}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")
        if self.jitter_sigma <= 0 or self.jitter_clip <= 0:
            raise ValueError("jitter sigma and clip must be positive")
        if self.translate_range < 0:
            raise ValueError("translate range must be non-negative")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one (seed, sample index) pair."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate(points, rng):
    angle = rng.uniform(0.0, 2.0 * np.pi)
    r = rotation_y(angle)
    out = points @ r.T
    out[:, 1] = points[:, 1]
    return out


def jitter(points, rng, sigma=0.01, clip=0.05):
    noise = np.clip(sigma * rng.standard_normal(points.shape), -clip, clip)
    return points + noise


def scale(points, rng, lo=0.8, hi=1.25):
    return points * rng.uniform(lo, hi, size=3)


def translate(points, rng, amount=0.1):
    return points + rng.uniform(-amount, amount, size=3)


def augment(cloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    pc = cloud if isinstance(cloud, PointCloud) else PointCloud(cloud)
    pts = pc.points
    mode = cfg.mode
    if mode == "none":
        return pc
    if mode in ("anisotropic_scaling", "all"):
        pts = scale(pts, rng, *cfg.scale_range)
    if mode in ("rotation", "all"):
        pts = rotate(pts, rng)
    if mode in ("translation", "all"):
        pts = translate(pts, rng, cfg.translate_range)
    if mode in ("jitter", "all"):
        pts = jitter(pts, rng, cfg.jitter_sigma, cfg.jitter_clip)
    return PointCloud(pts, pc.features)
