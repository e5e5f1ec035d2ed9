"""Time synchronization of thermal and RGB frame streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import EmptyStreamError, InvariantError
from .imgcore import FrameRecord

log = logging.getLogger(__name__)

# timestamps are compared at nanosecond resolution
_DT_DECIMALS = 9


@dataclass(frozen=True)
class SyncConfig:
    tolerance: float = 0.05
    offset: float = 0.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InvariantError("sync tolerance must be positive")


@dataclass(frozen=True)
class SyncedPair:
    id: str
    t: float
    thermal: FrameRecord
    rgb: FrameRecord
    dt: float

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "t": self.t,
            "thermal_frame": self.thermal.frame_id,
            "rgb_frame": self.rgb.frame_id,
            "dt": self.dt,
        }


@dataclass
class UnmatchedReport:
    ir: List[FrameRecord] = field(default_factory=list)
    rgb: List[FrameRecord] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


def _sorted(frames: Sequence[FrameRecord]) -> List[FrameRecord]:
    return sorted(frames, key=lambda f: (f.t, f.frame_id))


def synchronize(
    ir: Sequence[FrameRecord], rgb: Sequence[FrameRecord], config: SyncConfig = SyncConfig()
) -> Tuple[List[SyncedPair], UnmatchedReport]:
    """Pair each thermal frame with at most one RGB frame by nearest timestamp.

    Thermal times are shifted by ``config.offset`` first. All candidate
    pairings within tolerance are taken greedily in order of increasing
    time gap (ties go to the earlier RGB frame), so the outcome does not
    depend on input order. The pair time is the RGB timestamp.
    """
    ir_s, rgb_s = _sorted(ir), _sorted(rgb)
    report = UnmatchedReport()
    if not ir_s or not rgb_s:
        for name, stream in (("thermal", ir_s), ("rgb", rgb_s)):
            if not stream:
                report.notes.append(f"empty {name} stream")
                log.warning("synchronize: empty %s stream", name)
        report.ir, report.rgb = list(ir_s), list(rgb_s)
        return [], report

    t_ir = np.array([f.t for f in ir_s]) + config.offset
    t_rgb = np.array([f.t for f in rgb_s])
    candidates = []
    for i, ti in enumerate(t_ir):
        # only frames within tolerance can pair; the window is found by bisection
        lo = np.searchsorted(t_rgb, ti - config.tolerance - 1e-9, side="left")
        hi = np.searchsorted(t_rgb, ti + config.tolerance + 1e-9, side="right")
        for j in range(lo, hi):
            dt = round(abs(float(ti - t_rgb[j])), _DT_DECIMALS)
            if dt <= config.tolerance:
                candidates.append((dt, j, i))
    candidates.sort()

    used_ir, used_rgb = set(), set()
    chosen = []
    for dt, j, i in candidates:
        if i in used_ir or j in used_rgb:
            continue
        used_ir.add(i)
        used_rgb.add(j)
        chosen.append((j, i, dt))
    chosen.sort()

    pairs = [
        SyncedPair(f"pair-{n:06d}", rgb_s[j].t, ir_s[i], rgb_s[j], dt)
        for n, (j, i, dt) in enumerate(chosen, start=1)
    ]
    report.ir = [f for i, f in enumerate(ir_s) if i not in used_ir]
    report.rgb = [f for j, f in enumerate(rgb_s) if j not in used_rgb]
    return pairs, report


def estimate_offset(ir: Sequence[FrameRecord], rgb: Sequence[FrameRecord]) -> float:
    """Median over thermal frames of (nearest RGB time - thermal time).

    Feeding the result back as ``SyncConfig.offset`` removes a constant
    clock skew between the two cameras.
    """
    if not ir or not rgb:
        raise EmptyStreamError("offset estimation needs two non-empty streams")
    t_rgb = np.sort(np.array([f.t for f in rgb]))
    deltas = []
    for f in ir:
        k = int(np.searchsorted(t_rgb, f.t))
        near = [t_rgb[m] for m in (k - 1, k) if 0 <= m < t_rgb.size]
        best = min(near, key=lambda tr: (abs(tr - f.t), tr))
        deltas.append(best - f.t)
    return float(np.median(deltas))


def sync_report(pairs: Sequence[SyncedPair], unmatched: UnmatchedReport) -> dict:
    return {
        "pairs": [p.to_dict() for p in pairs],
        "unmatched_ir": [f.frame_id for f in unmatched.ir],
        "unmatched_rgb": [f.frame_id for f in unmatched.rgb],
        "notes": list(unmatched.notes),
    }
