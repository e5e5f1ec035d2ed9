"""Homography estimation between matched keypoints and thermal-to-RGB warping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    InvariantError,
    NoConsensusError,
    NonInvertibleError,
    PointAtInfinityError,
    TooFewCorrespondencesError,
)
from .imgcore import ImageBuffer, PixelPoint, ValidityMask, quantize

DENOM_EPS = 1e-12
DET_EPS = 1e-12
COLLINEAR_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map, scaled so the bottom-right entry is exactly 1."""

    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise InvariantError("homography has non-finite entries")
        if abs(h[2, 2]) < DENOM_EPS:
            raise InvariantError("cannot normalise a homography with h33 = 0")
        h = h / h[2, 2]
        h[2, 2] = 1.0
        if abs(np.linalg.det(h)) <= DET_EPS:
            raise NonInvertibleError("homography is singular")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def to_list(self) -> List[float]:
        return [float(v) for v in self.h.ravel()]

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.h @ other.h)


def _raw_apply(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map an ``(N, 2)`` array; raises when any denominator vanishes."""
    x, y = pts[:, 0], pts[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if np.any(np.abs(w) <= DENOM_EPS):
        raise PointAtInfinityError("point maps to infinity")
    xp = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    yp = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    return np.stack([xp, yp], axis=1)


def apply_points(H, pts) -> np.ndarray:
    h = H.h if isinstance(H, Homography) else np.asarray(H, dtype=np.float64)
    return _raw_apply(h, np.asarray(pts, dtype=np.float64).reshape(-1, 2))


def apply_h(H: Homography, p: PixelPoint) -> PixelPoint:
    x, y = apply_points(H, [[p.x, p.y]])[0]
    return PixelPoint(float(x), float(y))


@dataclass(frozen=True)
class Correspondence:
    p: PixelPoint
    q: PixelPoint


def _corr_arrays(cs: Sequence[Correspondence]) -> Tuple[np.ndarray, np.ndarray]:
    P = np.array([[c.p.x, c.p.y] for c in cs], dtype=np.float64).reshape(-1, 2)
    Q = np.array([[c.q.x, c.q.y] for c in cs], dtype=np.float64).reshape(-1, 2)
    return P, Q


def transform_error(H: Homography, c: Correspondence) -> float:
    """Distance from ``q`` to the dehomogenized image of ``p``."""
    x, y = apply_points(H, [[c.p.x, c.p.y]])[0]
    return math.hypot(c.q.x - x, c.q.y - y)


def transform_errors(H, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(Q - apply_points(H, P), axis=1)


def total_transform_error(H: Homography, cs: Sequence[Correspondence]) -> float:
    P, Q = _corr_arrays(cs)
    return float(np.sum(transform_errors(H, P, Q))) if len(P) else 0.0


# ---------------------------------------------------------------------------
# linear estimation


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity taking ``pts`` to zero centroid and mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d <= 0:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts: np.ndarray) -> bool:
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a = pts[j] - pts[i]
                b = pts[k] - pts[i]
                if abs(a[0] * b[1] - a[1] * b[0]) <= COLLINEAR_EPS:
                    return True
    return False


def _all_collinear(pts: np.ndarray) -> bool:
    centred = pts - pts.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    return s[0] == 0 or s[-1] / s[0] <= COLLINEAR_EPS


def _dlt_matrix(P: np.ndarray, Q: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    n = len(P)
    A = np.zeros((2 * n, 9))
    x, y = P[:, 0], P[:, 1]
    u, v = Q[:, 0], Q[:, 1]
    A[0::2, 0:3] = np.stack([-x, -y, -np.ones(n)], axis=1)
    A[0::2, 6:9] = np.stack([u * x, u * y, u], axis=1)
    A[1::2, 3:6] = np.stack([-x, -y, -np.ones(n)], axis=1)
    A[1::2, 6:9] = np.stack([v * x, v * y, v], axis=1)
    if weights is not None:
        A *= np.repeat(np.sqrt(weights), 2)[:, None]
    return A


def _dlt_arrays(P: np.ndarray, Q: np.ndarray, check_triples: bool = True) -> Homography:
    if len(P) < 4:
        raise TooFewCorrespondencesError(f"need at least 4 correspondences, got {len(P)}")
    Tp = _normalizer(P)
    Tq = _normalizer(Q)
    Pn = (P - P.mean(axis=0)) * Tp[0, 0]
    Qn = (Q - Q.mean(axis=0)) * Tq[0, 0]
    if check_triples and len(P) == 4:
        if _has_collinear_triple(Pn):
            raise DegenerateConfigurationError("three source points are collinear")
    elif _all_collinear(Pn):
        raise DegenerateConfigurationError("source points are collinear")
    A = _dlt_matrix(Pn, Qn)
    _, s, vt = np.linalg.svd(A)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(Tq) @ hn @ Tp
    if abs(h[2, 2]) < DENOM_EPS:
        raise DegenerateConfigurationError("solution has h33 = 0 and cannot be normalised")
    try:
        return Homography(h)
    except NonInvertibleError as exc:
        raise DegenerateConfigurationError("correspondences define a singular homography") from exc


def estimate_dlt(cs: Sequence[Correspondence]) -> Homography:
    """Normalised direct linear solution from four or more correspondences."""
    P, Q = _corr_arrays(cs)
    return _dlt_arrays(P, Q)


# ---------------------------------------------------------------------------
# robust estimation and refinement


@dataclass
class RobustConfig:
    threshold: float = 3.0
    max_iterations: int = 2000
    seed: int = 0
    confidence: float = 0.999
    refine_rounds: int = 50
    refine_tol: float = 1e-9
    weight_floor: float = 0.5
    # draw early samples from the best-ranked correspondences (input order)
    progressive: bool = True


@dataclass
class RegistrationReport:
    H: Homography
    inlier_flags: np.ndarray
    E_H: float
    ransac_iterations: int
    refine_rounds: int
    E_H_history: List[float] = field(default_factory=list)

    @property
    def inlier_count(self) -> int:
        return int(np.sum(self.inlier_flags))


def _ransac_trials_needed(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    p_good = inlier_ratio ** 4
    if p_good >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - p_good)


def _gn_jacobian(h: np.ndarray, P: np.ndarray):
    x, y = P[:, 0], P[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + 1.0
    xp = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    yp = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    n = len(P)
    J = np.zeros((2 * n, 8))
    J[0::2, 0] = x / w
    J[0::2, 1] = y / w
    J[0::2, 2] = 1 / w
    J[0::2, 6] = -x * xp / w
    J[0::2, 7] = -y * xp / w
    J[1::2, 3] = x / w
    J[1::2, 4] = y / w
    J[1::2, 5] = 1 / w
    J[1::2, 6] = -x * yp / w
    J[1::2, 7] = -y * yp / w
    return np.stack([xp, yp], axis=1), J


def _weighted_fit(h0: np.ndarray, P, Q, weights, iterations: int = 10) -> np.ndarray:
    """Minimise ``sum w_i |q_i - H p_i|^2`` with damped Gauss-Newton from ``h0``."""
    h = h0.copy()
    sw = np.repeat(np.sqrt(weights), 2)

    def cost(hh):
        try:
            r = (Q - _raw_apply(hh, P)).ravel() * sw
        except PointAtInfinityError:
            return math.inf
        return float(r @ r)

    current = cost(h)
    lam = 1e-3
    for _ in range(iterations):
        proj, J = _gn_jacobian(h, P)
        r = (Q - proj).ravel() * sw
        Jw = J * sw[:, None]
        A = Jw.T @ Jw
        g = Jw.T @ r
        improved = False
        for _ in range(8):
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = h.copy()
            cand.ravel()[:8] += step
            c = cost(cand)
            if c < current:
                h, current, lam = cand, c, lam / 10
                improved = True
                break
            lam *= 10
        if not improved:
            break
    return h


def refine(H: Homography, P: np.ndarray, Q: np.ndarray, config: RobustConfig = RobustConfig()):
    """Lower ``sum_i |q_i - H p_i|`` by iteratively reweighted least squares.

    Each round fits the weighted squared error with weights
    ``1 / max(E_i, weight_floor)``; a round is kept only if the unsquared
    total does not increase. Returns ``(H, history, rounds)``.
    """
    h = H.h.copy()
    E = float(np.sum(transform_errors(h, P, Q)))
    history = [E]
    rounds = 0
    for rounds in range(1, config.refine_rounds + 1):
        errs = transform_errors(h, P, Q)
        w = 1.0 / np.maximum(errs, config.weight_floor)
        cand = _weighted_fit(h, P, Q, w)
        try:
            cand_E = float(np.sum(transform_errors(cand, P, Q)))
        except PointAtInfinityError:
            break
        if not cand_E <= E:
            break
        delta = E - cand_E
        h, E = cand, cand_E
        history.append(E)
        if delta < config.refine_tol:
            break
    return Homography(h), history, rounds


def estimate_robust(cs: Sequence[Correspondence], config: RobustConfig = RobustConfig()) -> RegistrationReport:
    """Seeded 4-point RANSAC followed by IRLS refinement over the inliers.

    With ``config.progressive`` the list is assumed ordered best-first (for
    example by descriptor distance) and early hypotheses are drawn from a
    prefix that grows to the full list over the first quarter of the
    iteration budget.
    """
    P, Q = _corr_arrays(cs)
    return estimate_robust_arrays(P, Q, config)


def estimate_robust_arrays(P: np.ndarray, Q: np.ndarray, config: RobustConfig = RobustConfig()) -> RegistrationReport:
    n = len(P)
    if n < 4:
        raise TooFewCorrespondencesError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(config.seed)
    best_count, best_cost, best_h = -1, math.inf, None
    trials_needed = float(config.max_iterations)
    it = 0
    while it < config.max_iterations and it < trials_needed:
        it += 1
        pool = n
        if config.progressive:
            growth = max(1.0, config.max_iterations / 4.0)
            pool = min(n, max(8, int(math.ceil(n * it / growth))))
        idx = rng.choice(pool, size=4, replace=False)
        try:
            H = _dlt_arrays(P[idx], Q[idx])
            errs = transform_errors(H, P, Q)
        except (DegenerateConfigurationError, PointAtInfinityError, NonInvertibleError):
            continue
        inl = errs <= config.threshold
        count = int(inl.sum())
        cost = float(np.sum(np.minimum(errs, config.threshold)))
        if count > best_count or (count == best_count and cost < best_cost):
            best_count, best_cost, best_h = count, cost, H
            trials_needed = _ransac_trials_needed(count / n, config.confidence)
    if best_h is None or best_count < 8:
        raise NoConsensusError(f"best consensus has {max(best_count, 0)} inliers; need at least 8")

    # re-fit on the consensus set until it stops growing
    H, inl = best_h, transform_errors(best_h, P, Q) <= config.threshold
    for _ in range(5):
        try:
            cand = _dlt_arrays(P[inl], Q[inl])
            cand_inl = transform_errors(cand, P, Q) <= config.threshold
        except (DegenerateConfigurationError, PointAtInfinityError):
            break
        if cand_inl.sum() < inl.sum() or np.array_equal(cand_inl, inl):
            if cand_inl.sum() >= inl.sum():
                H, inl = cand, cand_inl
            break
        H, inl = cand, cand_inl

    H, history, rounds = refine(H, P[inl], Q[inl], config)
    return RegistrationReport(H, inl, history[-1], it, rounds, history)


# ---------------------------------------------------------------------------
# warping


def _warp_array(src: np.ndarray, H: Homography, out_w: int, out_h: int):
    """Bilinear inverse-mapped resampling of a float ``(h, w, c)`` array."""
    try:
        hinv = np.linalg.inv(H.h)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleError("homography is not invertible") from exc
    sh, sw = src.shape[:2]
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    w = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    ok = np.abs(w) > DENOM_EPS
    w_safe = np.where(ok, w, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / w_safe
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / w_safe
    eps = 1e-9
    valid = ok & (sx >= -eps) & (sy >= -eps) & (sx <= sw - 1 + eps) & (sy <= sh - 1 + eps)
    sx = np.clip(np.where(valid, sx, 0.0), 0, sw - 1)
    sy = np.clip(np.where(valid, sy, 0.0), 0, sh - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), max(sw - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.int64), max(sh - 2, 0))
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bottom = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out[~valid] = 0.0
    return out, valid


def warp(thermal: ImageBuffer, H: Homography, out_size: Tuple[int, int]) -> Tuple[ImageBuffer, ValidityMask]:
    """Resample ``thermal`` into the frame that ``H`` maps it onto.

    Each output pixel ``(x, y)`` reads the source at ``H^-1 (x, y)`` with
    bilinear interpolation; sources outside the thermal frame give 0 and
    a false mask bit. ``out_size`` is ``(width, height)``.
    """
    out_w, out_h = int(out_size[0]), int(out_size[1])
    if out_w <= 0 or out_h <= 0:
        raise InvariantError("output size must be positive")
    src = thermal.as_float()
    if src.ndim == 2:
        src = src[:, :, None]
    out, valid = _warp_array(src, H, out_w, out_h)
    if thermal.channels == 1:
        out = out[:, :, 0]
    return ImageBuffer(quantize(out, thermal.depth)), ValidityMask(valid)


# ---------------------------------------------------------------------------
# guided sub-pixel refinement


def _ncc_surface(ref: np.ndarray, moving: np.ndarray, cx: int, cy: int, radius: int, search: int) -> Optional[np.ndarray]:
    """NCC of the ``ref`` patch at (cx, cy) against ``moving`` shifted by every offset."""
    r, s = radius, search
    h, w = ref.shape
    if cx - r - s < 0 or cy - r - s < 0 or cx + r + s >= w or cy + r + s >= h:
        return None
    a = ref[cy - r:cy + r + 1, cx - r:cx + r + 1]
    a = a - a.mean()
    na = math.sqrt(float((a * a).sum()))
    if na == 0:
        return None
    out = np.empty((2 * s + 1, 2 * s + 1))
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            b = moving[cy + dy - r:cy + dy + r + 1, cx + dx - r:cx + dx + r + 1]
            b = b - b.mean()
            nb = math.sqrt(float((b * b).sum()))
            out[dy + s, dx + s] = float((a * b).sum()) / (na * nb) if nb > 0 else -1.0
    return out


def _quadratic_peak(surf: np.ndarray, iy: int, ix: int, min_ratio: float) -> Optional[Tuple[float, float]]:
    """Sub-pixel offset of a 3x3 neighbourhood's maximum from a 2-D quadratic fit.

    Returns ``None`` unless the fitted surface is a cap: both Hessian
    eigenvalues negative and within a factor ``1 / min_ratio`` of each other.
    """
    c = surf[iy, ix]
    gx = (surf[iy, ix + 1] - surf[iy, ix - 1]) / 2
    gy = (surf[iy + 1, ix] - surf[iy - 1, ix]) / 2
    dxx = surf[iy, ix - 1] - 2 * c + surf[iy, ix + 1]
    dyy = surf[iy - 1, ix] - 2 * c + surf[iy + 1, ix]
    dxy = (surf[iy + 1, ix + 1] - surf[iy + 1, ix - 1] - surf[iy - 1, ix + 1] + surf[iy - 1, ix - 1]) / 4
    Hs = np.array([[dxx, dxy], [dxy, dyy]])
    ev = np.linalg.eigvalsh(Hs)
    if not (ev[1] < 0 and ev[1] / ev[0] >= min_ratio):
        return None
    ox, oy = -np.linalg.solve(Hs, [gx, gy])
    if abs(ox) > 1 or abs(oy) > 1:
        return None
    return float(ox), float(oy)


def local_shifts(
    fixed: np.ndarray,
    moving: np.ndarray,
    points: np.ndarray,
    radius: int = 10,
    search: int = 3,
    valid: Optional[np.ndarray] = None,
    min_ncc: float = 0.5,
    min_std: float = 5.0,
    min_curvature_ratio: float = 0.1,
):
    """Sub-pixel displacement of ``moving`` relative to ``fixed`` at each point.

    Returns ``(shifts, ok)``; ``ok`` is false where the patch leaves the
    frame or covers invalid pixels, the fixed patch has a standard
    deviation below ``min_std`` grey levels, the correlation peak sits on
    the search border or is weaker than ``min_ncc``, or the peak is a
    ridge rather than a cap (its Hessian eigenvalues differ by more than
    ``1 / min_curvature_ratio``, as along a straight edge).
    """
    shifts = np.zeros((len(points), 2))
    ok = np.zeros(len(points), dtype=bool)
    r, s = radius, search
    for n, (x, y) in enumerate(points):
        cx, cy = int(round(x)), int(round(y))
        if valid is not None:
            y0, y1, x0, x1 = cy - r - s, cy + r + s + 1, cx - r - s, cx + r + s + 1
            if y0 < 0 or x0 < 0 or y1 > valid.shape[0] or x1 > valid.shape[1] or not valid[y0:y1, x0:x1].all():
                continue
        if cx - r < 0 or cy - r < 0 or cx + r >= fixed.shape[1] or cy + r >= fixed.shape[0]:
            continue
        if fixed[cy - r:cy + r + 1, cx - r:cx + r + 1].std() < min_std:
            continue
        surf = _ncc_surface(fixed, moving, cx, cy, r, s)
        if surf is None:
            continue
        iy, ix = np.unravel_index(int(np.argmax(surf)), surf.shape)
        if iy in (0, 2 * s) or ix in (0, 2 * s) or surf[iy, ix] < min_ncc:
            continue
        peak = _quadratic_peak(surf, iy, ix, min_curvature_ratio)
        if peak is None:
            continue
        shifts[n] = (ix - s + peak[0], iy - s + peak[1])
        ok[n] = True
    return shifts, ok


def refine_correspondences(
    image_1: ImageBuffer,
    image_2: ImageBuffer,
    H: Homography,
    P: np.ndarray,
    radius: int = 10,
    search: int = 3,
):
    """Re-locate each point of image 1 in image 2 to sub-pixel precision.

    ``image_1`` is warped into the frame of ``image_2`` with ``H``; the
    residual local shift around ``H p`` is measured by normalised cross
    correlation with a quadratic peak fit. Returns ``(Q, ok)`` where ``Q``
    holds the refined image-2 locations.
    """
    src = image_1.as_float()
    if src.ndim == 3:
        src = src.mean(axis=2)
    fixed, valid = _warp_array(src[:, :, None], H, image_2.width, image_2.height)
    target = image_2.as_float()
    if target.ndim == 3:
        target = target.mean(axis=2)
    pred = apply_points(H, P)
    shifts, ok = local_shifts(fixed[:, :, 0], target, pred, radius, search, valid)
    return pred + shifts, ok
