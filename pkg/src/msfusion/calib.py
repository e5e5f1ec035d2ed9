"""Pinhole camera refinement by damped least squares.

The camera is ``u = f*Xc/Zc + c_u``, ``v = f*Yc/Zc + c_v`` with
``(Xc, Yc, Zc) = R @ X + t``. Parameters are optimised as the vector

    theta = (f, c_u, c_v, d_1..d_n, r_x, r_y, r_z, t_x, t_y, t_z)

where ``r`` is the axis-angle form of ``R``, so every accepted update
stays on SO(3). Raw-element derivatives of the scalar reprojection error
with respect to ``R[j, k]`` and ``t[k]`` are available separately as
diagnostics (:func:`element_derivative_R`, :func:`element_derivative_t`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    InvariantError,
    MissingFileError,
    PointBehindCameraError,
    SingularSystemError,
    UnderDeterminedError,
)
from .imgcore import PixelPoint

MIN_DEPTH = 1e-12
ORTHO_TOL = 1e-9


def rotvec_to_matrix(r) -> np.ndarray:
    return Rotation.from_rotvec(np.array(r, dtype=np.float64)).as_matrix()


def matrix_to_rotvec(R) -> np.ndarray:
    return Rotation.from_matrix(np.array(R, dtype=np.float64)).as_rotvec()


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3):
        raise InvariantError("R must be 3x3")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or np.linalg.det(R) <= 0:
        raise InvariantError("R must be orthonormal with determinant +1")


@dataclass(frozen=True, eq=False)
class CameraParams:
    f: float
    c_u: float
    c_v: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    D: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.f > 0:
            raise InvariantError(f"focal length must be positive, got {self.f}")
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        _check_rotation(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "D", tuple(float(d) for d in self.D))

    @classmethod
    def from_axis_angle(cls, f, c_u, c_v, rotvec, t, D=()) -> "CameraParams":
        return cls(f, c_u, c_v, rotvec_to_matrix(rotvec), t, D)

    @property
    def axis_angle(self) -> np.ndarray:
        return matrix_to_rotvec(self.R)

    def to_theta(self) -> np.ndarray:
        return np.concatenate([[self.f, self.c_u, self.c_v], self.D, self.axis_angle, self.t])

    @classmethod
    def from_theta(cls, theta, n_distortion: int = 0) -> "CameraParams":
        theta = np.asarray(theta, dtype=np.float64)
        k = 3 + n_distortion
        return cls.from_axis_angle(theta[0], theta[1], theta[2], theta[k:k + 3], theta[k + 3:k + 6], theta[3:k])

    def to_dict(self) -> dict:
        return {
            "f": float(self.f),
            "c_u": float(self.c_u),
            "c_v": float(self.c_v),
            "D": list(self.D),
            "axis_angle": [float(v) for v in self.axis_angle],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        unknown = set(d) - {"f", "c_u", "c_v", "D", "axis_angle", "R", "t"}
        if unknown:
            raise InvariantError(f"unknown camera parameter keys: {sorted(unknown)}")
        if "R" in d:
            R = np.asarray(d["R"], dtype=np.float64)
        else:
            R = rotvec_to_matrix(d.get("axis_angle", [0.0, 0.0, 0.0]))
        return cls(float(d["f"]), float(d["c_u"]), float(d["c_v"]), R, d.get("t", [0.0, 0.0, 0.0]), tuple(d.get("D", ())))


@dataclass(frozen=True)
class Observation:
    X: Tuple[float, float, float]
    measured: PixelPoint


def _obs_arrays(obs: Sequence[Observation]) -> Tuple[np.ndarray, np.ndarray]:
    if not obs:
        return np.zeros((0, 3)), np.zeros((0, 2))
    Xs = np.array([o.X for o in obs], dtype=np.float64)
    uv = np.array([[o.measured.x, o.measured.y] for o in obs], dtype=np.float64)
    return Xs, uv


def _project_raw(f, cu, cv, D, R, t, Xs) -> np.ndarray:
    """Project ``(N, 3)`` points without validating ``R``."""
    Xc = Xs @ np.asarray(R).T + t
    z = Xc[:, 2]
    if np.any(z <= MIN_DEPTH):
        bad = int(np.argmax(z <= MIN_DEPTH))
        raise PointBehindCameraError(f"point {bad} has camera depth {z[bad]:.3g} <= {MIN_DEPTH}")
    x = Xc[:, 0] / z
    y = Xc[:, 1] / z
    u = f * x + cu
    v = f * y + cv
    if len(D):
        r2 = x * x + y * y
        scale = np.zeros_like(r2)
        rk = np.ones_like(r2)
        for d in D:
            rk = rk * r2
            scale = scale + d * rk
        u = u + (u - cu) * scale
        v = v + (v - cv) * scale
    return np.stack([u, v], axis=1)


def project_points(params: CameraParams, Xs) -> np.ndarray:
    Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, 3)
    return _project_raw(params.f, params.c_u, params.c_v, params.D, params.R, params.t, Xs)


def project(params: CameraParams, X) -> PixelPoint:
    u, v = project_points(params, X)[0]
    return PixelPoint(float(u), float(v))


def reproj_error(measured: PixelPoint, projected: PixelPoint) -> float:
    return math.hypot(measured.x - projected.x, measured.y - projected.y)


def point_errors(params: CameraParams, obs: Sequence[Observation]) -> np.ndarray:
    Xs, uv = _obs_arrays(obs)
    if not len(Xs):
        return np.zeros(0)
    return np.linalg.norm(uv - project_points(params, Xs), axis=1)


def total_error(params: CameraParams, obs: Sequence[Observation]) -> float:
    return float(np.sum(point_errors(params, obs)))


# ---------------------------------------------------------------------------
# parameter layouts for differentiation


class _Layout:
    """Maps a flat parameter vector to the projection inputs.

    ``axis_angle`` is the optimisation layout; ``raw`` exposes the nine
    matrix entries of ``R`` directly, with no re-orthonormalization.
    """

    def __init__(self, n_distortion: int, parametrization: str):
        if parametrization not in ("axis_angle", "raw"):
            raise ValueError(f"unknown parametrization {parametrization!r}")
        self.n = n_distortion
        self.raw = parametrization == "raw"

    def pack(self, p: CameraParams) -> np.ndarray:
        rot = p.R.ravel() if self.raw else p.axis_angle
        return np.concatenate([[p.f, p.c_u, p.c_v], p.D, rot, p.t])

    def unpack(self, vec):
        k = 3 + self.n
        nrot = 9 if self.raw else 3
        rot = vec[k:k + nrot]
        R = rot.reshape(3, 3) if self.raw else rotvec_to_matrix(rot)
        return vec[0], vec[1], vec[2], tuple(vec[3:k]), R, vec[k + nrot:k + nrot + 3]

    def names(self) -> List[str]:
        rot = [f"R{j}{k}" for j in range(3) for k in range(3)] if self.raw else ["r_x", "r_y", "r_z"]
        return ["f", "c_u", "c_v"] + [f"d{i + 1}" for i in range(self.n)] + rot + ["t_x", "t_y", "t_z"]


def _residuals(vec, layout: _Layout, Xs, uv, signed: bool) -> np.ndarray:
    f, cu, cv, D, R, t = layout.unpack(vec)
    diff = uv - _project_raw(f, cu, cv, D, R, t, Xs)
    if signed:
        return diff.ravel()
    return np.linalg.norm(diff, axis=1)


def default_steps(theta) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(np.asarray(theta, dtype=np.float64)))


def _jacobian(vec, layout, Xs, uv, steps, signed, scheme) -> np.ndarray:
    base = _residuals(vec, layout, Xs, uv, signed)
    J = np.empty((base.size, vec.size))
    for j in range(vec.size):
        h = steps[j]
        plus = vec.copy()
        plus[j] += h
        if scheme == "central":
            minus = vec.copy()
            minus[j] -= h
            J[:, j] = (_residuals(plus, layout, Xs, uv, signed) - _residuals(minus, layout, Xs, uv, signed)) / (2 * h)
        else:
            J[:, j] = (_residuals(plus, layout, Xs, uv, signed) - base) / h
    return J


def numeric_jacobian(
    params: CameraParams,
    obs: Sequence[Observation],
    steps=None,
    *,
    residuals: str = "norm",
    scheme: str = "forward",
    parametrization: str = "axis_angle",
) -> np.ndarray:
    """Finite-difference Jacobian of the reprojection residuals.

    With ``residuals="norm"`` rows are the scalar per-point errors (N rows);
    with ``"signed"`` rows are the interleaved ``(u_i - u'_i, v_i - v'_i)``
    components (2N rows) that the LM update works on. Entry ``(i, j)`` is
    ``(e_i(theta + step_j) - e_i(theta)) / step_j`` for the forward scheme.
    """
    if residuals not in ("norm", "signed"):
        raise ValueError(f"residuals must be 'norm' or 'signed', got {residuals!r}")
    if scheme not in ("forward", "central"):
        raise ValueError(f"scheme must be 'forward' or 'central', got {scheme!r}")
    layout = _Layout(len(params.D), parametrization)
    vec = layout.pack(params)
    steps = default_steps(vec) if steps is None else np.broadcast_to(np.asarray(steps, dtype=np.float64), vec.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")
    Xs, uv = _obs_arrays(obs)
    return _jacobian(vec, layout, Xs, uv, steps, residuals == "signed", scheme)


def parameter_names(params: CameraParams, parametrization: str = "axis_angle") -> List[str]:
    return _Layout(len(params.D), parametrization).names()


def _raw_element_derivative(params: CameraParams, obs: Sequence[Observation], obs_index: int, slot: int, delta: float) -> float:
    if not delta > 0:
        raise ValueError("delta must be positive")
    layout = _Layout(len(params.D), "raw")
    vec = layout.pack(params)
    Xs, uv = _obs_arrays(obs)
    base = _residuals(vec, layout, Xs, uv, signed=False)[obs_index]
    vec[slot] += delta
    return (_residuals(vec, layout, Xs, uv, signed=False)[obs_index] - base) / delta


def element_derivative_R(params: CameraParams, obs: Sequence[Observation], obs_index: int, j: int, k: int, delta: float) -> float:
    """Forward difference of ``e_i`` for a bump of the raw entry ``R[j, k]``.

    The perturbed matrix is used as-is (it is no longer a rotation).
    """
    return _raw_element_derivative(params, obs, obs_index, 3 + len(params.D) + 3 * j + k, delta)


def element_derivative_t(params: CameraParams, obs: Sequence[Observation], obs_index: int, k: int, delta: float) -> float:
    return _raw_element_derivative(params, obs, obs_index, 3 + len(params.D) + 9 + k, delta)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass(frozen=True, eq=False)
class LmState:
    theta: np.ndarray
    lam: float
    E: float
    iteration: int = 0
    n_distortion: int = 0
    accepted: Optional[bool] = None
    step_inf: float = 0.0
    candidate_E: Optional[float] = None

    def __post_init__(self):
        if not self.lam > 0:
            raise InvariantError("damping must be positive")
        if not self.E >= 0:
            raise InvariantError("total error must be non-negative")
        theta = np.array(self.theta, dtype=np.float64)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def start(cls, params: CameraParams, obs: Sequence[Observation], lam: float = 1e-3) -> "LmState":
        return cls(params.to_theta(), lam, total_error(params, obs), 0, len(params.D))

    @property
    def params(self) -> CameraParams:
        return CameraParams.from_theta(self.theta, self.n_distortion)


def _total_error_theta(theta, n_distortion, Xs, uv) -> float:
    layout = _Layout(n_distortion, "axis_angle")
    return float(np.sum(_residuals(theta, layout, Xs, uv, signed=False)))


def lm_step(state: LmState, obs: Sequence[Observation], factor: float = 10.0, scheme: str = "forward") -> LmState:
    """One damped Gauss-Newton update on the signed residual vector.

    The candidate ``theta - (J^T J + lam I)^-1 J^T e`` is kept only if it
    lowers the total error ``E``; the damping shrinks by ``factor`` on
    acceptance and grows by ``factor`` on rejection.
    """
    layout = _Layout(state.n_distortion, "axis_angle")
    Xs, uv = _obs_arrays(obs)
    theta = np.array(state.theta)
    e = _residuals(theta, layout, Xs, uv, signed=True)
    J = _jacobian(theta, layout, Xs, uv, default_steps(theta), True, scheme)
    A = J.T @ J + state.lam * np.eye(theta.size)
    g = J.T @ e
    try:
        delta = np.linalg.solve(A, g)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"normal matrix singular at lambda={state.lam:g}") from exc
    if not np.all(np.isfinite(delta)):
        raise SingularSystemError(f"normal matrix singular at lambda={state.lam:g}")
    candidate = theta - delta
    try:
        new_E = _total_error_theta(candidate, state.n_distortion, Xs, uv) if candidate[0] > 0 else math.inf
    except PointBehindCameraError:
        new_E = math.inf
    step_inf = float(np.max(np.abs(delta))) if delta.size else 0.0
    nxt = state.iteration + 1
    if new_E < state.E:
        return LmState(candidate, state.lam / factor, new_E, nxt, state.n_distortion, True, step_inf, new_E)
    return LmState(theta, state.lam * factor, state.E, nxt, state.n_distortion, False, step_inf, new_E)


@dataclass
class CalibConfig:
    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_factor: float = 10.0
    lambda_max: float = 1e12
    tol_error: float = 1e-10
    tol_step: float = 1e-12
    scheme: str = "forward"


@dataclass
class CalibrationReport:
    initial_E: float
    final_E: float
    iterations: int
    termination: str
    converged: bool
    final_lambda: float
    E_history: List[float]
    accepted_E: List[float]
    params: CameraParams
    distortion_model: str = "none"

    def to_dict(self) -> dict:
        return {
            "initial_E": self.initial_E,
            "final_E": self.final_E,
            "iterations": self.iterations,
            "termination": self.termination,
            "converged": self.converged,
            "final_lambda": self.final_lambda,
            "distortion_model": self.distortion_model,
            "E_history": list(self.E_history),
            "accepted_E": list(self.accepted_E),
            "params": self.params.to_dict(),
        }


def calibrate(initial: CameraParams, obs: Sequence[Observation], config: Optional[CalibConfig] = None) -> Tuple[CameraParams, CalibrationReport]:
    """Refine ``initial`` against ``obs`` until the error stops moving.

    Stops when a candidate step changes ``E`` by less than ``tol_error``,
    when an accepted step has infinity norm below ``tol_step``, when the
    damping exceeds ``lambda_max``, or at ``max_iters``. The last two are
    reported as non-converged with the best parameters found.
    """
    config = config or CalibConfig()
    m = initial.to_theta().size
    if len(obs) < 4 or 2 * len(obs) < m:
        raise UnderDeterminedError(
            f"{len(obs)} observations give {2 * len(obs)} residuals for {m} parameters (need >= 4 observations and 2N >= m)"
        )
    state = LmState.start(initial, obs, config.lambda_init)
    initial_E = state.E
    history = [state.E]
    accepted = [state.E]
    termination = "max_iterations"
    while state.iteration < config.max_iters:
        try:
            nxt = lm_step(state, obs, config.lambda_factor, config.scheme)
        except SingularSystemError:
            nxt = LmState(state.theta, state.lam * config.lambda_factor, state.E, state.iteration + 1, state.n_distortion, False)
        history.append(nxt.E)
        if nxt.accepted:
            accepted.append(nxt.E)
        prev_E = state.E
        state = nxt
        if nxt.candidate_E is not None and abs(nxt.candidate_E - prev_E) < config.tol_error:
            termination = "error_change"
            break
        if nxt.accepted and nxt.step_inf < config.tol_step:
            termination = "step_size"
            break
        if state.lam > config.lambda_max:
            termination = "lambda_overflow"
            break
    converged = termination in ("error_change", "step_size")
    params = state.params
    report = CalibrationReport(
        initial_E=initial_E,
        final_E=state.E,
        iterations=state.iteration,
        termination=termination,
        converged=converged,
        final_lambda=state.lam,
        E_history=history,
        accepted_E=accepted,
        params=params,
        distortion_model="radial" if initial.D else "none",
    )
    return params, report


def load_observations(path) -> List[Observation]:
    """Read ``X,Y,Z,u,v`` rows; a non-numeric first row is taken as a header."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row[:5]]
            except ValueError:
                if lineno == 1 and not out:
                    continue
                raise InvariantError(f"{path}:{lineno}: non-numeric observation row")
            if len(vals) != 5:
                raise InvariantError(f"{path}:{lineno}: expected 5 columns X,Y,Z,u,v")
            out.append(Observation(tuple(vals[:3]), PixelPoint(vals[3], vals[4])))
    return out
