"""End-to-end thermal/RGB composition for single pairs and manifest batches."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import features as ft
from .config import PipelineConfig
from .errors import ImageIOError, MsFusionError
from .fuse import CompositeImage, FusionParams, optimize_weights, overlay
from .imgcore import ImageBuffer, ValidityMask, load_image, parse_manifest, save_image, to_gray8
from .register import (
    RobustConfig,
    estimate_robust_arrays,
    refine,
    refine_correspondences,
    transform_errors,
    warp,
)
from .sync import SyncConfig, estimate_offset, sync_report, synchronize

log = logging.getLogger(__name__)

TIMING_KEYS = ("timings_ms", "total_ms")


@dataclass
class PairReport:
    id: str
    t: float
    keypoints_ir: int = 0
    keypoints_rgb: int = 0
    matches: int = 0
    H: Optional[List[float]] = None
    inliers: int = 0
    E_H: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    gamma_applied: Optional[float] = None
    gamma_mode: Optional[str] = None
    output: Optional[str] = None
    status: str = "ok"
    failure_stage: Optional[str] = None
    failure_reason: Optional[str] = None
    thermal_frame: Optional[str] = None
    rgb_frame: Optional[str] = None
    dt: Optional[float] = None
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, with_timings: bool = True) -> dict:
        d = {k: v for k, v in self.__dict__.items()}
        if not with_timings:
            d.pop("timings_ms")
        return d


def dumps(obj) -> str:
    """Canonical JSON used for every report file."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _Timer:
    def __init__(self):
        self.ms: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.ms[name] = round((time.perf_counter() - t0) * 1000.0, 3)


class _StageFailure(Exception):
    def __init__(self, stage: str, reason: str):
        super().__init__(reason)
        self.stage = stage
        self.reason = reason


def _robust_config(cfg: PipelineConfig) -> RobustConfig:
    r = cfg.ransac
    return RobustConfig(threshold=r.threshold, max_iterations=r.iterations, seed=r.seed, progressive=r.progressive)


def register_pair(thermal: ImageBuffer, rgb: ImageBuffer, cfg: PipelineConfig, report: PairReport, timer: _Timer):
    """Feature chain up to the homography. Raises ``_StageFailure`` on soft failures."""
    g_ir = to_gray8(thermal)
    g_rgb = to_gray8(rgb)
    with timer.stage("detect"):
        if cfg.edge_domain:
            w_ir = ft.edge_image(g_ir, cfg.edge_sigma)
            w_rgb = ft.edge_image(g_rgb, cfg.edge_sigma)
        else:
            w_ir, w_rgb = g_ir, g_rgb
        opts = dict(nms=cfg.nms, min_count=cfg.min_count, max_keypoints=cfg.max_keypoints, orientation_mode=cfg.orientation_mode)
        try:
            k_ir = ft.detect(w_ir, cfg.tau, **opts)
            k_rgb = ft.detect(w_rgb, cfg.tau, **opts)
        except MsFusionError as exc:
            raise _StageFailure("detect", str(exc))
        report.keypoints_ir, report.keypoints_rgb = len(k_ir), len(k_rgb)
        if len(k_ir) < 4 or len(k_rgb) < 4:
            raise _StageFailure("detect", f"too few keypoints ({len(k_ir)} thermal, {len(k_rgb)} rgb)")
    with timer.stage("describe"):
        pattern = ft.make_pattern(cfg.descriptor.n, cfg.descriptor.seed)
        sig = cfg.descriptor.smoothing
        d_ir = ft.describe_many(ft.smooth(w_ir, sig), k_ir, pattern)
        d_rgb = ft.describe_many(ft.smooth(w_rgb, sig), k_rgb, pattern)
    with timer.stage("match"):
        m = cfg.matcher
        matches = ft.match(d_ir, d_rgb, m.max_distance, m.cross_check, m.ratio)
        report.matches = len(matches)
        if len(matches) < cfg.min_matches:
            raise _StageFailure("match", f"{len(matches)} matches, need {cfg.min_matches}")
    P = np.array([[k_ir[x.index_1].p.x, k_ir[x.index_1].p.y] for x in matches])
    Q = np.array([[k_rgb[x.index_2].p.x, k_rgb[x.index_2].p.y] for x in matches])
    with timer.stage("homography"):
        rcfg = _robust_config(cfg)
        try:
            reg = estimate_robust_arrays(P, Q, rcfg)
        except MsFusionError as exc:
            raise _StageFailure("homography", str(exc))
        H, E_H, inliers = reg.H, reg.E_H, reg.inlier_count
        if cfg.subpixel.enabled:
            Pin = P[reg.inlier_flags]
            for _ in range(cfg.subpixel.rounds):
                Qr, ok = refine_correspondences(w_ir, w_rgb, H, Pin, cfg.subpixel.radius, cfg.subpixel.search)
                if ok.sum() < cfg.min_matches:
                    break
                keep = ok.copy()
                keep[ok] = transform_errors(H, Pin[ok], Qr[ok]) <= rcfg.threshold
                if keep.sum() < cfg.min_matches:
                    break
                H, hist, _ = refine(H, Pin[keep], Qr[keep], rcfg)
                E_H, inliers = hist[-1], int(keep.sum())
    report.H = H.to_list()
    report.E_H = float(E_H)
    report.inliers = inliers
    return H


def _passthrough(rgb: ImageBuffer, cfg: PipelineConfig) -> CompositeImage:
    data = rgb.data if rgb.depth == 8 else to_gray8(rgb).data
    params = FusionParams.from_alpha(cfg.fusion.alpha, None, cfg.fusion.gamma_mode)
    return CompositeImage(ImageBuffer(data), params, ValidityMask.full(rgb.width, rgb.height, False))


def run_pair(
    thermal: ImageBuffer,
    rgb: ImageBuffer,
    config: Optional[PipelineConfig] = None,
    pair_id: str = "pair",
    t: float = 0.0,
) -> Tuple[CompositeImage, PairReport]:
    """Register ``thermal`` onto ``rgb`` and blend them.

    Soft failures (no features, too few matches, no consensus) do not
    raise: the report names the failing stage and the composite is the
    RGB frame unchanged.
    """
    cfg = config or PipelineConfig()
    report = PairReport(pair_id, t)
    timer = _Timer()
    t0 = time.perf_counter()
    try:
        H = register_pair(thermal, rgb, cfg, report, timer)
        with timer.stage("warp"):
            I_w, mask = warp(to_gray8(thermal), H, (rgb.width, rgb.height))
        with timer.stage("fuse"):
            fz = cfg.fusion
            if fz.alpha_mode == "optimized" and mask.count():
                params = optimize_weights(I_w, to_gray8(rgb), None, mask, fz.gamma_mode)
            else:
                params = FusionParams.from_alpha(fz.alpha, None, fz.gamma_mode)
            composite = overlay(I_w, rgb, params, mask, fz.colormap)
    except _StageFailure as exc:
        report.status = "failed"
        report.failure_stage = exc.stage
        report.failure_reason = exc.reason
        composite = _passthrough(rgb, cfg)
        log.info("%s: %s stage failed: %s", pair_id, exc.stage, exc.reason)
    p = composite.params
    report.alpha, report.beta, report.gamma = p.alpha, p.beta, p.gamma
    report.gamma_mode = p.gamma_mode
    report.gamma_applied = composite.gamma_applied
    timer.ms["total"] = round((time.perf_counter() - t0) * 1000.0, 3)
    report.timings_ms = timer.ms
    return composite, report


# ---------------------------------------------------------------------------
# batches


@dataclass
class SessionReport:
    pair_count: int = 0
    composites_written: int = 0
    soft_failures: int = 0
    hard_failures: int = 0
    unmatched_ir: int = 0
    unmatched_rgb: int = 0
    offset: float = 0.0
    failures: List[dict] = field(default_factory=list)
    timings_ms: Dict[str, float] = field(default_factory=dict)
    calibration: Optional[dict] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _resolve(manifest: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else manifest.parent / p


def run_batch(
    ir_manifest,
    rgb_manifest,
    config: Optional[PipelineConfig],
    out_dir,
    calibration: Optional[dict] = None,
) -> SessionReport:
    """Synchronize two manifests, run every pair and write the results.

    Layout under ``out_dir``: ``composites/<id>.png``, ``reports/<id>.json``,
    ``sync.json`` and ``summary.json``. Pairs whose image files cannot be
    read are counted as hard failures and produce no composite.
    """
    cfg = config or PipelineConfig()
    ir_manifest, rgb_manifest, out_dir = Path(ir_manifest), Path(rgb_manifest), Path(out_dir)
    ir = parse_manifest(ir_manifest)
    rgb = parse_manifest(rgb_manifest)
    offset = cfg.sync.offset
    if cfg.sync.estimate_offset and ir and rgb:
        offset = estimate_offset(ir, rgb)
    pairs, unmatched = synchronize(ir, rgb, SyncConfig(cfg.sync.tolerance, offset))

    (out_dir / "composites").mkdir(parents=True, exist_ok=True)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    (out_dir / "sync.json").write_text(dumps(sync_report(pairs, unmatched)))

    session = SessionReport(
        pair_count=len(pairs),
        unmatched_ir=len(unmatched.ir),
        unmatched_rgb=len(unmatched.rgb),
        offset=offset,
        calibration=calibration,
    )

    def work(pair):
        try:
            th = load_image(_resolve(ir_manifest, pair.thermal.path))
            im = load_image(_resolve(rgb_manifest, pair.rgb.path))
        except ImageIOError as exc:
            return pair, None, str(exc)
        composite, report = run_pair(th, im, cfg, pair.id, pair.t)
        return pair, (composite, report), None

    t0 = time.perf_counter()
    if cfg.workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, pairs))
    else:
        results = [work(p) for p in pairs]

    stage_totals: Dict[str, float] = {}
    for pair, outcome, load_error in results:
        if outcome is None:
            session.hard_failures += 1
            session.failures.append({"id": pair.id, "stage": "load", "reason": load_error})
            continue
        composite, report = outcome
        report.thermal_frame = pair.thermal.frame_id
        report.rgb_frame = pair.rgb.frame_id
        report.dt = pair.dt
        rel = f"composites/{pair.id}.png"
        save_image(composite.image, out_dir / rel)
        report.output = rel
        session.composites_written += 1
        if report.status != "ok":
            session.soft_failures += 1
            session.failures.append({"id": pair.id, "stage": report.failure_stage, "reason": report.failure_reason})
        (out_dir / "reports" / f"{pair.id}.json").write_text(dumps(report.to_dict()))
        for k, v in report.timings_ms.items():
            stage_totals[k] = round(stage_totals.get(k, 0.0) + v, 3)
    stage_totals["wall"] = round((time.perf_counter() - t0) * 1000.0, 3)
    session.timings_ms = stage_totals
    (out_dir / "summary.json").write_text(dumps(session.to_dict()))
    return session


def strip_timings(report: dict) -> dict:
    """Copy of a report dict without wall-clock fields."""
    return {k: v for k, v in report.items() if k not in TIMING_KEYS}
