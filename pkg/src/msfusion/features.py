"""Keypoint detection, moment orientation, binary descriptors and matching.

The detector uses a pixel's 16-neighbour discrete circle of radius 3 and
accepts it when at least ``min_count`` (default 7) neighbours are brighter
than ``I_p + tau`` or darker than ``I_p - tau``. No contiguous arc is
required. Descriptors compare pixel pairs of a seeded Gaussian pattern
steered by the keypoint orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .errors import ImageTooSmallError, InvariantError, PatchOutsideImageError
from .imgcore import ImageBuffer, PixelPoint, round_half_away, to_gray8

# (dx, dy) of the radius-3 Bresenham circle, clockwise from 12 o'clock
CIRCLE = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)
PATCH_RADIUS = 15
BORDER = 16
MIN_SIZE = 2 * BORDER + 1
DEFAULT_TAU = 20
DEFAULT_MIN_COUNT = 7
DEFAULT_BITS = 256
DEFAULT_SEED = 42


@dataclass(frozen=True)
class Keypoint:
    p: PixelPoint
    score: float
    theta: float = 0.0

    @property
    def x(self) -> int:
        return int(self.p.x)

    @property
    def y(self) -> int:
        return int(self.p.y)


@dataclass(frozen=True, eq=False)
class Descriptor:
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=np.uint8).ravel()
        if b.size == 0 or np.any(b > 1):
            raise InvariantError("descriptor bits must be a non-empty 0/1 vector")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def n(self) -> int:
        return int(self.bits.size)

    def to_hex(self) -> str:
        width = (self.n + 3) // 4
        value = int("".join(map(str, self.bits)), 2)
        return format(value << (4 * width - self.n), f"0{width}x")

    @classmethod
    def from_hex(cls, text: str, n: int) -> "Descriptor":
        width = len(text) * 4
        value = int(text, 16) >> (width - n)
        return cls([int(c) for c in format(value, f"0{n}b")])

    def __eq__(self, other):
        return isinstance(other, Descriptor) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class Match:
    index_1: int
    index_2: int
    distance: int


@dataclass(frozen=True, eq=False)
class SamplingPattern:
    """``pairs`` is an ``(n, 4)`` int array of ``(ax, ay, bx, by)`` offsets."""

    pairs: np.ndarray
    seed: int

    def __post_init__(self):
        pairs = np.array(self.pairs, dtype=np.int64).reshape(-1, 4)
        r2a = pairs[:, 0] ** 2 + pairs[:, 1] ** 2
        r2b = pairs[:, 2] ** 2 + pairs[:, 3] ** 2
        if np.any(r2a > PATCH_RADIUS ** 2) or np.any(r2b > PATCH_RADIUS ** 2):
            raise InvariantError("sampling offsets must lie within the patch radius")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    @property
    def n(self) -> int:
        return int(self.pairs.shape[0])

    def __eq__(self, other):
        return isinstance(other, SamplingPattern) and self.seed == other.seed and np.array_equal(self.pairs, other.pairs)


def _gray_array(image: ImageBuffer) -> np.ndarray:
    if image.channels != 1 or image.depth != 8:
        image = to_gray8(image)
    return image.data


# ---------------------------------------------------------------------------
# detection


def _circle_stack(img: np.ndarray) -> np.ndarray:
    """Circle samples for every interior pixel, shape ``(16, H - 32, W - 32)``."""
    h, w = img.shape
    out = np.empty((16, h - 2 * BORDER, w - 2 * BORDER), dtype=np.int16)
    for n, (dx, dy) in enumerate(CIRCLE):
        out[n] = img[BORDER + dy:h - BORDER + dy, BORDER + dx:w - BORDER + dx]
    return out


def _evaluate(image: ImageBuffer, tau: float, min_count: int):
    if not tau > 0:
        raise ValueError("tau must be positive")
    img = _gray_array(image)
    h, w = img.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ImageTooSmallError(f"image {w}x{h} is smaller than {MIN_SIZE}x{MIN_SIZE}")
    centre = img[BORDER:h - BORDER, BORDER:w - BORDER].astype(np.int16)
    diff = _circle_stack(img) - centre
    qualifies = (diff > tau) | (diff < -tau)
    mask = np.zeros((h, w), dtype=bool)
    score = np.zeros((h, w), dtype=np.float64)
    mask[BORDER:h - BORDER, BORDER:w - BORDER] = qualifies.sum(axis=0) >= min_count
    score[BORDER:h - BORDER, BORDER:w - BORDER] = np.where(qualifies, np.abs(diff), 0).sum(axis=0)
    score[~mask] = 0.0
    return mask, score


def candidate_mask(image: ImageBuffer, tau: float = DEFAULT_TAU, min_count: int = DEFAULT_MIN_COUNT) -> np.ndarray:
    """Pixels passing the circle count test, before any suppression.

    Only pixels at least ``BORDER`` from every edge are evaluated.
    """
    return _evaluate(image, tau, min_count)[0]


def candidate_scores(image: ImageBuffer, tau: float = DEFAULT_TAU, min_count: int = DEFAULT_MIN_COUNT) -> np.ndarray:
    """Sum of ``|I_n - I_p|`` over qualifying neighbours; zero off the candidate set."""
    return _evaluate(image, tau, min_count)[1]


def _suppress(mask: np.ndarray, score: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; equal scores resolve to the smaller (y, x)."""
    keep = mask.copy()
    score = np.where(mask, score, -1.0)
    h, w = score.shape
    padded = np.pad(score, 1, constant_values=-2.0)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (score > nb) if earlier else (score >= nb)
    return keep


def detect(
    image: ImageBuffer,
    tau: float = DEFAULT_TAU,
    *,
    nms: bool = True,
    min_count: int = DEFAULT_MIN_COUNT,
    max_keypoints: Optional[int] = None,
    orient: bool = True,
    orientation_mode: str = "atan2",
) -> List[Keypoint]:
    """Detect keypoints sorted by descending score, then ``(y, x)``."""
    mask, score = _evaluate(image, tau, min_count)
    keep = _suppress(mask, score) if nms else mask
    ys, xs = np.nonzero(keep)
    s = score[ys, xs]
    order = np.lexsort((xs, ys, -s))
    if max_keypoints is not None:
        order = order[:max_keypoints]
    ys, xs, s = ys[order], xs[order], s[order]
    if orient and ys.size:
        thetas = orientations(image, xs, ys, orientation_mode)
    else:
        thetas = np.zeros(ys.size)
    return [Keypoint(PixelPoint(float(x), float(y)), float(v), float(t)) for x, y, v, t in zip(xs, ys, s, thetas)]


# ---------------------------------------------------------------------------
# orientation


def _disc_offsets(radius: int = PATCH_RADIUS):
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r)
    inside = dx * dx + dy * dy <= radius * radius
    return dx[inside], dy[inside]


_DISC_X, _DISC_Y = _disc_offsets()


def _check_patch(img: np.ndarray, xs, ys) -> None:
    h, w = img.shape
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    bad = (xs < PATCH_RADIUS) | (ys < PATCH_RADIUS) | (xs > w - 1 - PATCH_RADIUS) | (ys > h - 1 - PATCH_RADIUS)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise PatchOutsideImageError(f"patch around ({xs[k]}, {ys[k]}) leaves the {w}x{h} image")


def _wrap_angle(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.where(theta <= -math.pi, theta + 2 * math.pi, theta)


def orientations(image: ImageBuffer, xs, ys, mode: str = "atan2") -> np.ndarray:
    img = _gray_array(image) if isinstance(image, ImageBuffer) else np.asarray(image)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    _check_patch(img, xs, ys)
    vals = img[ys[:, None] + _DISC_Y[None, :], xs[:, None] + _DISC_X[None, :]].astype(np.float64)
    m10 = vals @ _DISC_X.astype(np.float64)
    m01 = vals @ _DISC_Y.astype(np.float64)
    if mode == "atan2":
        return _wrap_angle(np.arctan2(m01, m10))
    if mode == "arctan":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.arctan(np.where(m10 == 0, np.copysign(np.inf, m01), m01 / np.where(m10 == 0, 1, m10)))
    raise ValueError(f"unknown orientation mode {mode!r}")


def orientation(image: ImageBuffer, p, mode: str = "atan2") -> float:
    """Angle of the intensity moment vector ``(m10, m01)`` over the radius-15 disc."""
    x, y = (p.x, p.y) if isinstance(p, PixelPoint) else p
    return float(orientations(image, [int(round(x))], [int(round(y))], mode)[0])


# ---------------------------------------------------------------------------
# descriptors


def make_pattern(n: int = DEFAULT_BITS, seed: int = DEFAULT_SEED) -> SamplingPattern:
    """Draw ``n`` comparison pairs from an isotropic Gaussian (sigma 31/5).

    Uses numpy's PCG64 generator; draws that round outside the radius-15
    disc, or pairs whose two points coincide, are redrawn.
    """
    if n < 8:
        raise ValueError("pattern needs at least 8 pairs")
    rng = np.random.default_rng(seed)
    sigma = 31.0 / 5.0
    pairs = []
    while len(pairs) < n:
        ax, ay, bx, by = round_half_away(rng.normal(0.0, sigma, size=4)).astype(np.int64)
        if ax * ax + ay * ay > PATCH_RADIUS ** 2 or bx * bx + by * by > PATCH_RADIUS ** 2:
            continue
        if ax == bx and ay == by:
            continue
        pairs.append((ax, ay, bx, by))
    return SamplingPattern(np.array(pairs), seed)


def _steered_offsets(pattern: SamplingPattern, thetas: np.ndarray):
    c = np.cos(thetas)[:, None]
    s = np.sin(thetas)[:, None]
    P = pattern.pairs.astype(np.float64)
    ax = round_half_away(c * P[:, 0] - s * P[:, 1]).astype(np.int64)
    ay = round_half_away(s * P[:, 0] + c * P[:, 1]).astype(np.int64)
    bx = round_half_away(c * P[:, 2] - s * P[:, 3]).astype(np.int64)
    by = round_half_away(s * P[:, 2] + c * P[:, 3]).astype(np.int64)
    return ax, ay, bx, by


def describe_many(image: ImageBuffer, keypoints: Sequence[Keypoint], pattern: SamplingPattern) -> np.ndarray:
    """Bit matrix ``(len(keypoints), n)`` of uint8 0/1 values."""
    img = _gray_array(image)
    if not keypoints:
        return np.zeros((0, pattern.n), dtype=np.uint8)
    xs = np.array([int(round(k.p.x)) for k in keypoints])
    ys = np.array([int(round(k.p.y)) for k in keypoints])
    thetas = np.array([k.theta for k in keypoints])
    _check_patch(img, xs, ys)
    ax, ay, bx, by = _steered_offsets(pattern, thetas)
    ia = img[ys[:, None] + ay, xs[:, None] + ax]
    ib = img[ys[:, None] + by, xs[:, None] + bx]
    return (ia < ib).astype(np.uint8)


def describe(image: ImageBuffer, kp: Keypoint, pattern: SamplingPattern) -> Descriptor:
    """Bit ``i`` is 1 when ``I(a_i) < I(b_i)`` after steering; ties give 0."""
    return Descriptor(describe_many(image, [kp], pattern)[0])


# ---------------------------------------------------------------------------
# matching


def _as_bit_matrix(descs) -> np.ndarray:
    if isinstance(descs, np.ndarray):
        return descs.astype(np.uint8).reshape(descs.shape[0], -1) if descs.size else descs.reshape(0, 0).astype(np.uint8)
    if not descs:
        return np.zeros((0, 0), dtype=np.uint8)
    return np.stack([d.bits for d in descs])


def hamming_matrix(bits_1: np.ndarray, bits_2: np.ndarray) -> np.ndarray:
    p1 = np.packbits(bits_1, axis=1)
    p2 = np.packbits(bits_2, axis=1)
    out = np.empty((p1.shape[0], p2.shape[0]), dtype=np.int64)
    chunk = 512
    for start in range(0, p1.shape[0], chunk):
        block = np.bitwise_xor(p1[start:start + chunk, None, :], p2[None, :, :])
        out[start:start + chunk] = np.bitwise_count(block).sum(axis=2)
    return out


def match(
    desc_1,
    desc_2,
    max_distance: Optional[int] = None,
    cross_check: bool = True,
    ratio: Optional[float] = None,
) -> List[Match]:
    """Brute-force Hamming nearest neighbours from set 1 into set 2.

    Nearest-neighbour ties pick the lower index. ``max_distance`` defaults
    to a quarter of the descriptor length.
    """
    b1 = _as_bit_matrix(desc_1)
    b2 = _as_bit_matrix(desc_2)
    if b1.shape[0] == 0 or b2.shape[0] == 0:
        return []
    n = b1.shape[1]
    if b2.shape[1] != n:
        raise InvariantError("descriptor lengths differ")
    limit = n // 4 if max_distance is None else max_distance
    dist = hamming_matrix(b1, b2)
    best_j = np.argmin(dist, axis=1)
    best_d = dist[np.arange(dist.shape[0]), best_j]
    keep = best_d <= limit
    if cross_check:
        best_i = np.argmin(dist, axis=0)
        keep &= best_i[best_j] == np.arange(dist.shape[0])
    if ratio is not None and dist.shape[1] > 1:
        second = np.partition(dist, 1, axis=1)[:, 1]
        keep &= best_d < ratio * second
    out = [Match(int(i), int(best_j[i]), int(best_d[i])) for i in np.nonzero(keep)[0]]
    out.sort(key=lambda m: (m.distance, m.index_1, m.index_2))
    return out


# ---------------------------------------------------------------------------
# preprocessing and visualization


def edge_image(image: ImageBuffer, sigma: float = 1.0) -> ImageBuffer:
    """Gradient-magnitude copy of ``image`` on the 8-bit scale.

    Thermal and visible intensities are only weakly related, but their
    edges tend to coincide; an intensity inversion leaves this unchanged.
    The magnitude is scaled so its 99th percentile maps to 255.
    """
    img = _gray_array(image).astype(np.float64)
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    ref = np.percentile(mag, 99.0)
    if ref <= 0:
        return ImageBuffer(np.zeros(mag.shape, dtype=np.uint8))
    return ImageBuffer(np.clip(round_half_away(mag * 255.0 / ref), 0, 255).astype(np.uint8))


def smooth(image: ImageBuffer, sigma: float) -> ImageBuffer:
    img = _gray_array(image)
    if sigma <= 0:
        return ImageBuffer(img)
    out = ndimage.gaussian_filter(img.astype(np.float64), sigma, mode="nearest")
    return ImageBuffer(np.clip(round_half_away(out), 0, 255).astype(np.uint8))


KEYPOINT_COLOR = (0, 255, 0)
LINE_COLORS = [(255, 255, 0), (255, 0, 255), (0, 255, 255), (255, 128, 0), (128, 0, 255), (0, 128, 255)]


def _to_rgb8(image: ImageBuffer) -> np.ndarray:
    if image.depth == 16:
        if image.channels == 1:
            from .imgcore import normalize_16_to_8

            image = normalize_16_to_8(image)
        else:
            image = ImageBuffer((image.data >> 8).astype(np.uint8))
    data = image.data
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    return data


def render_matches(
    img_1: ImageBuffer,
    img_2: ImageBuffer,
    kps_1: Sequence[Keypoint],
    kps_2: Sequence[Keypoint],
    matches: Sequence[Match],
) -> ImageBuffer:
    """Side-by-side canvas with keypoint circles and one line per match."""
    a = _to_rgb8(img_1)
    b = _to_rgb8(img_2)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    off = a.shape[1]
    for k in kps_1:
        cv2.circle(canvas, (int(round(k.p.x)), int(round(k.p.y))), 3, KEYPOINT_COLOR, 1, cv2.LINE_8)
    for k in kps_2:
        cv2.circle(canvas, (int(round(k.p.x)) + off, int(round(k.p.y))), 3, KEYPOINT_COLOR, 1, cv2.LINE_8)
    for n, m in enumerate(matches):
        p = kps_1[m.index_1].p
        q = kps_2[m.index_2].p
        cv2.line(
            canvas,
            (int(round(p.x)), int(round(p.y))),
            (int(round(q.x)) + off, int(round(q.y))),
            LINE_COLORS[n % len(LINE_COLORS)],
            1,
            cv2.LINE_8,
        )
    return ImageBuffer(canvas)


# ---------------------------------------------------------------------------
# dumps


def keypoints_csv(keypoints: Sequence[Keypoint]) -> str:
    lines = ["x,y,score,theta"]
    lines += [f"{k.p.x:g},{k.p.y:g},{k.score:.17g},{k.theta:.17g}" for k in keypoints]
    return "\n".join(lines) + "\n"


def descriptors_hex(bits: np.ndarray) -> str:
    return "".join(Descriptor(row).to_hex() + "\n" for row in bits)
