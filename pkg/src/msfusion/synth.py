"""Synthetic RGB/thermal pairs with a known homography.

Patterns are procedural functions of continuous coordinates, so the
"thermal" frame is rendered by evaluating the pattern at ``H (x, y)`` for
every thermal pixel. That is the inverse-mapping warp of the RGB frame by
``H^-1``, without resampling blur or empty borders.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Tuple

import numpy as np

from .errors import InvariantError
from .imgcore import ImageBuffer, quantize
from .register import Homography, apply_points

PATTERNS = ("checker", "blobs", "gradient")


@dataclass(frozen=True)
class SynthSpec:
    width: int = 640
    height: int = 480
    pattern: str = "blobs"
    H: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    noise_sigma: float = 0.0
    invert: bool = False
    seed: int = 0
    cell: int = 40
    n_blobs: int = 120

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise InvariantError(f"pattern must be one of {PATTERNS}")
        if self.width <= 0 or self.height <= 0:
            raise InvariantError("canvas size must be positive")
        if self.noise_sigma < 0:
            raise InvariantError("noise sigma must be non-negative")
        object.__setattr__(self, "H", tuple(float(v) for v in np.asarray(self.H, dtype=np.float64).ravel()))
        Homography(np.array(self.H).reshape(3, 3))

    @property
    def homography(self) -> Homography:
        return Homography(np.array(self.H).reshape(3, 3))

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "pattern": self.pattern,
            "H": list(self.H),
            "noise_sigma": self.noise_sigma,
            "invert": self.invert,
            "seed": self.seed,
            "cell": self.cell,
            "n_blobs": self.n_blobs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        allowed = {"width", "height", "pattern", "H", "noise_sigma", "invert", "seed", "cell", "n_blobs"}
        unknown = set(d) - allowed
        if unknown:
            raise InvariantError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def similarity_h(angle_deg: float, tx: float, ty: float, center=(320.0, 240.0), scale: float = 1.0) -> Homography:
    """Rotation by ``angle_deg`` about ``center`` followed by a translation."""
    a = np.deg2rad(angle_deg)
    c, s = scale * np.cos(a), scale * np.sin(a)
    cx, cy = center
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    T0 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    T1 = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
    return Homography(T1 @ R @ T0)


def _cell_levels(i: np.ndarray, j: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic pseudo-random level per grid cell."""
    h = (i.astype(np.uint64) * np.uint64(73856093)) ^ (j.astype(np.uint64) * np.uint64(19349663)) ^ np.uint64(seed * 83492791 + 1)
    h = (h ^ (h >> np.uint64(13))) * np.uint64(0x5BD1E995)
    h = h ^ (h >> np.uint64(15))
    return (h % np.uint64(1000)).astype(np.float64) / 999.0


def _checker(spec: SynthSpec) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Checkerboard with per-cell random levels and a faint blob texture.

    Plain checker corners all look alike, so descriptors could not tell
    them apart; the texture makes each neighbourhood distinct.
    """
    s = float(spec.cell)
    texture = _blobs(spec)

    def f(x, y):
        # 4x4 supersampling keeps cell edges free of staircase aliasing
        acc = np.zeros_like(x)
        offs = (np.arange(4) + 0.5) / 4 - 0.5
        for ox in offs:
            for oy in offs:
                i = np.floor((x + ox) / s).astype(np.int64)
                j = np.floor((y + oy) / s).astype(np.int64)
                base = np.where((i + j) % 2 == 0, 60.0, 170.0)
                acc += base + 70.0 * _cell_levels(i + 100000, j + 100000, spec.seed) - 35.0
        return acc / 16.0 + 0.5 * (texture(x, y) - 128.0)

    return f


def _blobs(spec: SynthSpec) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_blobs
    w, h = spec.width, spec.height
    cx = rng.uniform(-0.25 * w, 1.25 * w, n)
    cy = rng.uniform(-0.25 * h, 1.25 * h, n)
    sig = rng.uniform(4.0, 18.0, n)
    amp = rng.uniform(40.0, 110.0, n) * rng.choice([-1.0, 1.0], n)

    def f(x, y):
        out = np.full(x.shape, 128.0)
        for k in range(n):
            r2 = (x - cx[k]) ** 2 + (y - cy[k]) ** 2
            near = r2 < (5 * sig[k]) ** 2
            if near.any():
                out[near] += amp[k] * np.exp(-r2[near] / (2 * sig[k] ** 2))
        return out

    return f


def _gradient(spec: SynthSpec) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    w, h = spec.width, spec.height

    def f(x, y):
        return 30.0 + 190.0 * (0.6 * x / w + 0.4 * y / h)

    return f


def render(spec: SynthSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    maker = {"checker": _checker, "blobs": _blobs, "gradient": _gradient}[spec.pattern]
    return maker(spec)(xs, ys)


def make_synthetic(spec: SynthSpec) -> Tuple[ImageBuffer, ImageBuffer, Homography]:
    """Return ``(rgb, thermal, H)`` where ``H`` maps thermal pixels onto RGB pixels."""
    ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    rgb_vals = render(spec, xs, ys)
    H = spec.homography
    mapped = apply_points(H, np.stack([xs.ravel(), ys.ravel()], axis=1))
    th_vals = render(spec, mapped[:, 0].reshape(xs.shape), mapped[:, 1].reshape(xs.shape))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed + 7919)
        th_vals = th_vals + rng.normal(0.0, spec.noise_sigma, th_vals.shape)
    if spec.invert:
        th_vals = 255.0 - th_vals
    rgb8 = quantize(rgb_vals, 8)
    rgb = ImageBuffer(np.repeat(rgb8[:, :, None], 3, axis=2))
    thermal = ImageBuffer(quantize(th_vals, 8))
    return rgb, thermal, H


def corner_error(H_est: Homography, H_true: Homography, width: int, height: int) -> np.ndarray:
    """Distances between where each homography sends the four frame corners."""
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
    return np.linalg.norm(apply_points(H_est, corners) - apply_points(H_true, corners), axis=1)
