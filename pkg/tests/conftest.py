import numpy as np
import pytest

from msfusion.calib import CameraParams, Observation, project_points, rotvec_to_matrix
from msfusion.imgcore import ImageBuffer, PixelPoint


def make_scene(rng, n=50, f=800.0, c=(320.0, 240.0), noise=0.0):
    """Random camera looking at a cloud of points in front of it."""
    rotvec = rng.normal(0.0, 0.3, 3)
    t = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(4.0, 6.0)])
    truth = CameraParams.from_axis_angle(f, c[0], c[1], rotvec, t)
    # points sampled in camera space and mapped back so all are visible
    Xc = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.2, 1.2, n), rng.uniform(3.0, 8.0, n)])
    Xs = (Xc - truth.t) @ truth.R
    uv = project_points(truth, Xs)
    if noise:
        uv = uv + rng.normal(0.0, noise, uv.shape)
    obs = [Observation(tuple(X), PixelPoint(*m)) for X, m in zip(Xs, uv)]
    return truth, obs


def perturb(truth: CameraParams, rng, frac=0.10, rot_deg=5.0) -> CameraParams:
    def jitter(v):
        return v * (1 + frac * rng.choice([-1.0, 1.0]))

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = rotvec_to_matrix(axis * np.deg2rad(rot_deg)) @ truth.R
    t = truth.t * (1 + frac * rng.choice([-1.0, 1.0], 3))
    return CameraParams(jitter(truth.f), jitter(truth.c_u), jitter(truth.c_v), R, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene(rng):
    return make_scene(rng)


@pytest.fixture
def random_gray():
    def _make(seed, size=64):
        return ImageBuffer(np.random.default_rng(seed).integers(0, 256, (size, size), dtype=np.uint8))

    return _make


def write_session(root, frames, ir_times=None, rgb_times=None):
    """Write ``frames`` (list of (thermal, rgb) buffers) plus two manifests.

    Returns the manifest paths. Timestamps default to 0.1 s spacing.
    """
    from msfusion.imgcore import save_image

    root.mkdir(parents=True, exist_ok=True)
    ir_times = ir_times or [0.1 * k for k in range(len(frames))]
    rgb_times = rgb_times or [0.1 * k + 0.01 for k in range(len(frames))]
    ir_rows, rgb_rows = [], []
    for k, ((th, im), ti, tr) in enumerate(zip(frames, ir_times, rgb_times)):
        if th is not None:
            save_image(th, root / f"ir_{k}.png")
        if im is not None:
            save_image(im, root / f"rgb_{k}.png")
        ir_rows.append(f"ir{k},{ti:.3f},ir_{k}.png")
        rgb_rows.append(f"rgb{k},{tr:.3f},rgb_{k}.png")
    (root / "ir.csv").write_text("\n".join(ir_rows) + "\n")
    (root / "rgb.csv").write_text("\n".join(rgb_rows) + "\n")
    return root / "ir.csv", root / "rgb.csv"


@pytest.fixture(scope="session")
def small_pairs():
    """Three registered 320x240 synthetic pairs with their true homographies."""
    from msfusion.synth import SynthSpec, make_synthetic, similarity_h

    out = []
    for k, (angle, tx, ty) in enumerate([(4, 6, -3), (-6, -5, 4), (8, 2, 7)]):
        H = similarity_h(angle, tx, ty, center=(160, 120))
        spec = SynthSpec(width=320, height=240, pattern="blobs", H=tuple(H.h.ravel()), noise_sigma=1.0, invert=True, seed=k, n_blobs=40)
        out.append(make_synthetic(spec))
    return out
