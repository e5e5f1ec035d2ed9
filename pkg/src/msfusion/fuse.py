"""Weighted overlay of a warped thermal frame onto its RGB partner."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import cv2
import numpy as np

from .errors import DimensionMismatchError, EmptyImageError, InvariantError
from .imgcore import ImageBuffer, ValidityMask, quantize, to_gray8

GAMMA_MODES = ("paper-literal", "zero", "recenter")
COLORMAPS = {"inferno": cv2.COLORMAP_INFERNO, "jet": cv2.COLORMAP_JET, "hot": cv2.COLORMAP_HOT}


@dataclass(frozen=True)
class FusionParams:
    """Blend weights and brightness offset.

    ``gamma`` is the base offset; ``None`` means "use the mean of the two
    image means". How it is applied depends on ``gamma_mode``.
    """

    alpha: float = 0.5
    beta: float = 0.5
    gamma: Optional[float] = None
    gamma_mode: str = "recenter"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise InvariantError("alpha and beta must lie in [0, 1]")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise InvariantError(f"alpha + beta must equal 1, got {self.alpha + self.beta!r}")
        if self.gamma_mode not in GAMMA_MODES:
            raise InvariantError(f"gamma_mode must be one of {GAMMA_MODES}")

    @classmethod
    def from_alpha(cls, alpha: float, gamma: Optional[float] = None, gamma_mode: str = "recenter") -> "FusionParams":
        return cls(alpha, 1.0 - alpha, gamma, gamma_mode)


@dataclass(frozen=True, eq=False)
class CompositeImage:
    image: ImageBuffer
    params: FusionParams
    mask: ValidityMask
    gamma_applied: float = 0.0


def _pixels(image, mask: Optional[ValidityMask] = None) -> np.ndarray:
    data = image.as_float() if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if mask is None:
        return data
    return data[mask.bits]


def mean_intensity(image, mask: Optional[ValidityMask] = None) -> float:
    """Average sample value over the image (or over ``mask`` when given)."""
    vals = _pixels(image, mask)
    if vals.size == 0:
        raise EmptyImageError("mean of an empty image")
    return float(np.mean(vals))


def offset_gamma(mean_w: float, mean_2: float) -> float:
    return (mean_w + mean_2) / 2.0


def _working_gray(image) -> np.ndarray:
    if isinstance(image, ImageBuffer):
        return to_gray8(image).as_float() if (image.channels != 1 or image.depth != 8) else image.as_float()
    return np.asarray(image, dtype=np.float64)


def blend_objective(alpha: float, I_w, I_2, target, mask: Optional[ValidityMask] = None) -> float:
    w, b, t = (_working_gray(x) for x in (I_w, I_2, target))
    sel = mask.bits if mask is not None else np.ones(w.shape, dtype=bool)
    r = alpha * w[sel] + (1.0 - alpha) * b[sel] - t[sel]
    return float(r @ r)


def optimize_weights(
    I_w: ImageBuffer,
    I_2: ImageBuffer,
    target: Union[ImageBuffer, np.ndarray, None] = None,
    mask: Optional[ValidityMask] = None,
    gamma_mode: str = "recenter",
) -> FusionParams:
    """Least-squares blend weight against ``target`` with ``beta = 1 - alpha``.

    The objective is quadratic in alpha, so the minimiser is closed form;
    it is clamped to [0, 1]. Without a target, the per-pixel mean of the
    two inputs is used, which gives alpha = 0.5.
    """
    w = _working_gray(I_w)
    b = _working_gray(I_2)
    t = (w + b) / 2.0 if target is None else _working_gray(target)
    if w.shape != b.shape or w.shape != t.shape:
        raise DimensionMismatchError(f"shapes differ: {w.shape}, {b.shape}, {t.shape}")
    sel = np.ones(w.shape, dtype=bool) if mask is None else mask.bits
    if sel.shape != w.shape:
        raise DimensionMismatchError("mask does not match the images")
    if not sel.any():
        raise EmptyImageError("mask selects no pixels")
    d = w[sel] - b[sel]
    denom = float(d @ d)
    if denom < 1e-9:
        alpha = 0.5
    else:
        alpha = float(d @ (t[sel] - b[sel])) / denom
        alpha = min(1.0, max(0.0, alpha))
    return FusionParams.from_alpha(alpha, None, gamma_mode)


def present_thermal(I_w: ImageBuffer, channels: int, colormap: Optional[str] = None) -> np.ndarray:
    """Thermal frame as a float array with ``channels`` channels."""
    gray = to_gray8(I_w).data if (I_w.channels != 1 or I_w.depth != 8) else I_w.data
    if channels == 1:
        return gray.astype(np.float64)
    if colormap:
        if colormap not in COLORMAPS:
            raise InvariantError(f"unknown colormap {colormap!r}; choose from {sorted(COLORMAPS)}")
        bgr = cv2.applyColorMap(gray, COLORMAPS[colormap])
        return bgr[:, :, ::-1].astype(np.float64)
    return np.repeat(gray[:, :, None], 3, axis=2).astype(np.float64)


def overlay(
    I_w: ImageBuffer,
    I_2: ImageBuffer,
    params: FusionParams,
    mask: Optional[ValidityMask] = None,
    colormap: Optional[str] = None,
) -> CompositeImage:
    """Blend ``alpha * I_w + beta * I_2 + gamma`` on the mask; ``I_2`` elsewhere.

    The two means feeding gamma are taken over the masked pixels. In
    ``recenter`` mode the offset is shifted by the blend's own mean so the
    composite mean lands near gamma; ``zero`` applies no offset.
    """
    if (I_w.width, I_w.height) != (I_2.width, I_2.height):
        raise DimensionMismatchError(f"thermal {I_w.size} vs rgb {I_2.size}")
    if mask is None:
        mask = ValidityMask.full(I_2.width, I_2.height)
    if not mask.matches(I_2):
        raise DimensionMismatchError("mask does not match the images")
    rgb = I_2.as_float()
    if I_2.depth == 16:
        rgb = to_gray8(I_2).as_float() if I_2.channels == 1 else np.floor(rgb / 257.0 + 0.5)
    thermal = present_thermal(I_w, I_2.channels, colormap)
    a, b = params.alpha, params.beta

    applied = 0.0
    if params.gamma_mode != "zero" and mask.count():
        mean_w = mean_intensity(thermal, mask)
        mean_2 = mean_intensity(rgb, mask)
        base = params.gamma if params.gamma is not None else offset_gamma(mean_w, mean_2)
        if params.gamma_mode == "paper-literal":
            applied = base
        else:
            applied = base - (a * mean_w + b * mean_2)
        params = replace(params, gamma=base)
    elif params.gamma_mode == "zero":
        params = replace(params, gamma=0.0)

    blended = a * thermal + b * rgb + applied
    out = np.where(mask.bits[..., None] if rgb.ndim == 3 else mask.bits, blended, rgb)
    return CompositeImage(ImageBuffer(quantize(out, 8)), params, mask, float(applied))


def blend_prequant(I_w: ImageBuffer, I_2: ImageBuffer, params: FusionParams, gamma: float = 0.0) -> np.ndarray:
    """Unrounded, unclamped blend over the whole frame (diagnostics/tests)."""
    rgb = I_2.as_float()
    thermal = present_thermal(I_w, I_2.channels)
    return params.alpha * thermal + params.beta * rgb + gamma
