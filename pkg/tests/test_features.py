import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import CIRCLE, brute_force_candidates, brute_force_hamming, brute_force_match
from msfusion import features as ft
from msfusion.errors import ImageTooSmallError, InvariantError, PatchOutsideImageError
from msfusion.imgcore import ImageBuffer, PixelPoint, to_gray8
from msfusion.register import apply_points
from msfusion.synth import SynthSpec, make_synthetic, similarity_h


def gray(arr):
    return ImageBuffer(np.asarray(arr, dtype=np.uint8))


def canvas(value=100, size=41):
    return np.full((size, size), value, dtype=np.uint8)


def test_circle_geometry_matches_reference():
    assert [tuple(c) for c in ft.CIRCLE] == CIRCLE
    assert all(round(math.hypot(dx, dy)) == 3 for dx, dy in CIRCLE)


class TestDetect:
    def test_constant_image_has_no_keypoints(self):
        assert ft.detect(gray(canvas())) == []

    def test_eight_brighter_neighbours_is_candidate(self):
        img = canvas()
        for dx, dy in CIRCLE[::2]:
            img[20 + dy, 20 + dx] = 120
        assert ft.candidate_mask(gray(img), tau=10)[20, 20]

    def test_six_brighter_neighbours_is_not(self):
        img = canvas()
        for dx, dy in CIRCLE[:6]:
            img[20 + dy, 20 + dx] = 150
        assert not ft.candidate_mask(gray(img), tau=10)[20, 20]

    def test_no_contiguity_required(self):
        img = canvas()
        # seven isolated, non-adjacent neighbours
        for dx, dy in [CIRCLE[k] for k in (0, 2, 4, 6, 8, 10, 12)]:
            img[20 + dy, 20 + dx] = 60
        assert ft.candidate_mask(gray(img), tau=10)[20, 20]

    def test_threshold_is_strict(self):
        img = canvas()
        for dx, dy in CIRCLE:
            img[20 + dy, 20 + dx] = 110
        assert not ft.candidate_mask(gray(img), tau=10)[20, 20]
        assert ft.candidate_mask(gray(img), tau=9)[20, 20]

    def test_score_sums_qualifying_differences(self):
        img = canvas()
        for k, (dx, dy) in enumerate(CIRCLE[:8]):
            img[20 + dy, 20 + dx] = 130 if k % 2 else 70
        assert ft.candidate_scores(gray(img), tau=10)[20, 20] == 8 * 30

    def test_too_small(self):
        with pytest.raises(ImageTooSmallError):
            ft.detect(gray(np.zeros((32, 40))))

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            ft.detect(gray(canvas()), tau=0)

    def test_keypoints_respect_border(self, random_gray):
        kps = ft.detect(random_gray(3), 20)
        assert kps
        assert all(16 <= k.p.x <= 64 - 17 and 16 <= k.p.y <= 64 - 17 for k in kps)
        assert all(-math.pi < k.theta <= math.pi for k in kps)

    def test_sorted_by_score_then_position(self, random_gray):
        kps = ft.detect(random_gray(4), 20)
        keys = [(-k.score, k.p.y, k.p.x) for k in kps]
        assert keys == sorted(keys)

    def test_nms_keeps_local_maxima_only(self, random_gray):
        img = random_gray(5)
        scores = ft.candidate_scores(img, 20)
        for k in ft.detect(img, 20):
            x, y = int(k.p.x), int(k.p.y)
            assert scores[y, x] == scores[y - 1:y + 2, x - 1:x + 2].max()

    def test_nms_off_returns_raw_candidates(self, random_gray):
        img = random_gray(6)
        raw = {(int(k.p.x), int(k.p.y)) for k in ft.detect(img, 20, nms=False, orient=False)}
        ys, xs = np.nonzero(ft.candidate_mask(img, 20))
        assert raw == set(zip(xs.tolist(), ys.tolist()))

    def test_equal_score_plateau_resolves_to_one(self):
        # two adjacent pixels with identical neighbourhoods and scores
        img = canvas(100, 41)
        img[20, 20] = img[20, 21] = 10
        mask, score = ft._evaluate(gray(img), 20, 7)
        keep = ft._suppress(mask, score)
        assert keep[18:23, 18:24].sum() <= mask[18:23, 18:24].sum()
        plateau = np.argwhere(keep & (score == score.max()))
        assert len(plateau) == 1

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("tau", [10, 20, 40])
    def test_candidates_match_brute_force(self, random_gray, seed, tau):
        img = random_gray(seed)
        ys, xs = np.nonzero(ft.candidate_mask(img, tau))
        assert set(zip(xs.tolist(), ys.tolist())) == brute_force_candidates(img.data, tau)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 40))
    def test_invariant_to_constant_shift(self, seed, shift):
        base = np.random.default_rng(seed).integers(0, 200, (48, 48))
        a = ft.detect(gray(base), 20)
        b = ft.detect(gray(base + shift), 20)
        assert [(k.p, k.score) for k in a] == [(k.p, k.score) for k in b]


class TestOrientation:
    def test_diagonal_mass_is_quarter_pi(self):
        img = canvas(0)
        img[25, 25] = 200
        assert ft.orientation(gray(img), (20, 20)) == pytest.approx(math.pi / 4)

    def test_mass_right_symmetric(self):
        img = canvas(0)
        img[18:23, 28] = 90
        assert ft.orientation(gray(img), PixelPoint(20, 20)) == 0.0

    def test_straight_left_is_pi_not_minus_pi(self):
        img = canvas(0)
        img[20, 10] = 50
        assert ft.orientation(gray(img), (20, 20)) == pytest.approx(math.pi)

    def test_arctan_mode_loses_quadrant(self):
        img = canvas(0)
        img[15, 15] = 200  # up-left: atan2 gives -3pi/4, arctan gives pi/4
        assert ft.orientation(gray(img), (20, 20)) == pytest.approx(-3 * math.pi / 4)
        assert ft.orientation(gray(img), (20, 20), mode="arctan") == pytest.approx(math.pi / 4)

    def test_rotation_by_ninety_degrees(self):
        rng = np.random.default_rng(2)
        img = np.zeros((41, 41))
        yy, xx = np.mgrid[0:41, 0:41]
        for _ in range(6):
            cx, cy = rng.uniform(8, 32, 2)
            img += rng.uniform(40, 120) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 30.0)
        a = gray(np.clip(img, 0, 255).round())
        # np.rot90 turns counter-clockwise on screen, which is -90 degrees with y down
        b = gray(np.rot90(np.clip(img, 0, 255).round(), k=-1))
        t0 = ft.orientation(a, (20, 20))
        t1 = ft.orientation(b, (20, 20))
        d = (t1 - t0 - math.pi / 2 + math.pi) % (2 * math.pi) - math.pi
        assert abs(d) < 0.05

    def test_patch_outside(self):
        with pytest.raises(PatchOutsideImageError):
            ft.orientation(gray(canvas()), (5, 20))


class TestPattern:
    def test_deterministic(self):
        assert ft.make_pattern(256, 42) == ft.make_pattern(256, 42)
        assert ft.make_pattern(256, 42) != ft.make_pattern(256, 43)

    def test_within_radius(self):
        p = ft.make_pattern(1024, 1).pairs
        assert np.all(p[:, 0] ** 2 + p[:, 1] ** 2 <= 225)
        assert np.all(p[:, 2] ** 2 + p[:, 3] ** 2 <= 225)

    def test_cardinality(self):
        assert ft.make_pattern(8, 7).n == 8

    def test_spread_is_roughly_sigma(self):
        p = ft.make_pattern(4096, 0).pairs
        assert np.std(p) == pytest.approx(31 / 5, rel=0.1)

    def test_too_few_bits(self):
        with pytest.raises(ValueError):
            ft.make_pattern(4, 0)

    def test_rejects_out_of_patch_offsets(self):
        with pytest.raises(InvariantError):
            ft.SamplingPattern(np.array([[16, 0, 0, 0]]), 0)


class TestDescribe:
    def test_all_ones_when_every_a_darker(self):
        pattern = ft.make_pattern(64, 3)
        img = np.zeros((41, 41), dtype=np.uint8)
        for ax, ay, bx, by in pattern.pairs:
            img[20 + by, 20 + bx] = 255
        # a points that are also b points of another pair would tie; keep those out
        b_pts = {(bx, by) for _, _, bx, by in pattern.pairs}
        expected = np.array([0 if (ax, ay) in b_pts else 1 for ax, ay, _, _ in pattern.pairs])
        d = ft.describe(gray(img), ft.Keypoint(PixelPoint(20, 20), 1.0, 0.0), pattern)
        assert np.array_equal(d.bits, expected)
        assert expected.mean() > 0.5

    def test_all_ones_on_ramp_with_matching_pattern(self):
        # horizontal ramp and a pattern whose b point is always to the right of a
        pairs = np.array([[-k, 0, k, 0] for k in range(1, 9)] + [[-3, k - 4, 3, k - 4] for k in range(8)])
        pattern = ft.SamplingPattern(pairs, 0)
        img = np.tile(np.arange(41, dtype=np.uint8) * 5, (41, 1))
        d = ft.describe(gray(img), ft.Keypoint(PixelPoint(20, 20), 1.0, 0.0), pattern)
        assert d.bits.all()

    def test_constant_image_all_zero(self):
        d = ft.describe(gray(canvas()), ft.Keypoint(PixelPoint(20, 20), 1.0, 0.7), ft.make_pattern())
        assert not d.bits.any()

    def test_deterministic(self, random_gray):
        img = random_gray(1)
        kp = ft.Keypoint(PixelPoint(30, 30), 1.0, 0.3)
        pattern = ft.make_pattern()
        assert ft.describe(img, kp, pattern) == ft.describe(img, kp, pattern)

    def test_patch_outside(self, random_gray):
        with pytest.raises(PatchOutsideImageError):
            ft.describe(random_gray(1), ft.Keypoint(PixelPoint(3, 30), 1.0, 0.0), ft.make_pattern())

    def test_steering_by_half_turn_swaps_points(self, random_gray):
        img = random_gray(9)
        pattern = ft.make_pattern(128, 5)
        flipped = ft.SamplingPattern(-pattern.pairs, 5)
        kp = ft.Keypoint(PixelPoint(32, 32), 1.0, math.pi)
        plain = ft.Keypoint(PixelPoint(32, 32), 1.0, 0.0)
        assert ft.describe(img, kp, pattern) == ft.describe(img, plain, flipped)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 2, 3]), st.integers(0, 40))
    def test_affine_intensity_invariance(self, seed, a, b):
        base = np.random.default_rng(seed).integers(0, 70, (48, 48))
        kps = [ft.Keypoint(PixelPoint(24, 24), 1.0, 0.4), ft.Keypoint(PixelPoint(20, 27), 1.0, -2.0)]
        pattern = ft.make_pattern(256, 42)
        d1 = ft.describe_many(gray(base), kps, pattern)
        d2 = ft.describe_many(gray(a * base + b), kps, pattern)
        assert np.array_equal(d1, d2)

    def test_hex_round_trip(self):
        bits = np.random.default_rng(0).integers(0, 2, 256)
        d = ft.Descriptor(bits)
        assert len(d.to_hex()) == 64
        assert ft.Descriptor.from_hex(d.to_hex(), 256) == d
        odd = ft.Descriptor(bits[:10])
        assert ft.Descriptor.from_hex(odd.to_hex(), 10) == odd

    def test_rotation_robustness_on_blobs(self):
        H = similarity_h(30, 0, 0)
        rgb, thermal, Ht = make_synthetic(SynthSpec(pattern="blobs", H=tuple(H.h.ravel()), seed=1))
        g1, g2 = to_gray8(thermal), to_gray8(rgb)
        k1, k2 = ft.detect(g1, 20), ft.detect(g2, 20)
        pattern = ft.make_pattern()
        d1, d2 = ft.describe_many(g1, k1, pattern), ft.describe_many(g2, k2, pattern)
        P1 = np.array([[k.p.x, k.p.y] for k in k1])
        P2 = np.array([[k.p.x, k.p.y] for k in k2])
        dist = np.linalg.norm(apply_points(Ht, P1)[:, None] - P2[None], axis=2)
        j = dist.argmin(axis=1)
        ok = dist[np.arange(len(j)), j] <= 1.5
        assert ok.sum() >= 20
        steered = (d1[ok] != d2[j[ok]]).sum(axis=1)
        assert np.mean(steered <= 0.2 * 256) >= 0.8
        # without steering the same keypoints disagree far more
        flat1 = ft.describe_many(g1, [ft.Keypoint(k.p, k.score, 0.0) for k in k1], pattern)
        flat2 = ft.describe_many(g2, [ft.Keypoint(k.p, k.score, 0.0) for k in k2], pattern)
        unsteered = (flat1[ok] != flat2[j[ok]]).sum(axis=1)
        assert np.mean(unsteered) > 2 * np.mean(steered)


class TestMatch:
    def bits(self, seed, n=6, nbits=64):
        return np.random.default_rng(seed).integers(0, 2, (n, nbits)).astype(np.uint8)

    def test_identity(self):
        b = self.bits(0)
        ms = ft.match(b, b)
        assert [(m.index_1, m.index_2, m.distance) for m in ms] == [(i, i, 0) for i in range(6)]

    def test_three_bit_difference(self):
        a = np.zeros((1, 256), dtype=np.uint8)
        b = a.copy()
        b[0, [3, 100, 200]] = 1
        ms = ft.match(a, b, max_distance=64)
        assert [(m.index_1, m.index_2, m.distance) for m in ms] == [(0, 0, 3)]

    def test_threshold(self):
        a = np.zeros((1, 256), dtype=np.uint8)
        b = a.copy()
        b[0, :200] = 1
        assert ft.match(a, b, max_distance=64) == []

    def test_default_threshold_is_quarter(self):
        a = np.zeros((1, 256), dtype=np.uint8)
        b = a.copy()
        b[0, :64] = 1
        assert len(ft.match(a, b)) == 1
        b[0, 64] = 1
        assert ft.match(a, b) == []

    def test_empty(self):
        assert ft.match(np.zeros((0, 8), dtype=np.uint8), self.bits(1, nbits=8)) == []
        assert ft.match([], []) == []

    def test_accepts_descriptor_objects(self):
        b = self.bits(2)
        ms = ft.match([ft.Descriptor(r) for r in b], [ft.Descriptor(r) for r in b[::-1]])
        assert {(m.index_1, m.index_2) for m in ms} == {(i, 5 - i) for i in range(6)}

    def test_ratio_test_drops_ambiguous(self):
        a = np.zeros((1, 32), dtype=np.uint8)
        b = np.zeros((2, 32), dtype=np.uint8)
        b[0, :4] = 1
        b[1, 4:9] = 1
        assert len(ft.match(a, b, ratio=None)) == 1
        assert ft.match(a, b, ratio=0.8) == []
        assert len(ft.match(a, b, ratio=0.9)) == 1

    def test_hamming_matrix_against_oracle(self):
        a, b = self.bits(3, 7, 200), self.bits(4, 5, 200)
        D = ft.hamming_matrix(a, b)
        for i in range(7):
            for j in range(5):
                assert D[i, j] == brute_force_hamming(a[i], b[j])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(1, 12), st.integers(1, 12), st.booleans())
    def test_matches_oracle_and_is_symmetric(self, seed, n1, n2, cross):
        r = np.random.default_rng(seed)
        a = r.integers(0, 2, (n1, 24)).astype(np.uint8)
        b = r.integers(0, 2, (n2, 24)).astype(np.uint8)
        ms = ft.match(a, b, max_distance=10, cross_check=cross)
        assert [(m.index_1, m.index_2, m.distance) for m in ms] == brute_force_match(a, b, 10, cross)
        if cross:
            back = ft.match(b, a, max_distance=10)
            assert {(m.index_2, m.index_1) for m in back} == {(m.index_1, m.index_2) for m in ms}


class TestRender:
    def images(self):
        return gray(np.full((40, 50), 30)), gray(np.full((60, 35), 60))

    def test_layout(self):
        a, b = self.images()
        out = ft.render_matches(a, b, [], [], [])
        assert (out.width, out.height, out.channels) == (85, 60, 3)
        assert np.all(out.data[:40, :50] == 30) and np.all(out.data[:60, 50:] == 60)
        assert np.all(out.data[40:, :50] == 0)

    def test_keypoint_marks_only(self):
        a, b = self.images()
        k = [ft.Keypoint(PixelPoint(20, 20), 1.0)]
        out = ft.render_matches(a, b, k, k, [])
        green = np.all(out.data == ft.KEYPOINT_COLOR, axis=2)
        assert green[:, :50].any() and green[:, 50:].any()
        assert not np.any(np.all(out.data == ft.LINE_COLORS[0], axis=2))

    def test_one_line(self):
        a, b = self.images()
        k1 = [ft.Keypoint(PixelPoint(10, 10), 1.0)]
        k2 = [ft.Keypoint(PixelPoint(20, 30), 1.0)]
        out = ft.render_matches(a, b, k1, k2, [ft.Match(0, 0, 0)])
        line = np.all(out.data == ft.LINE_COLORS[0], axis=2)
        assert line.any()
        ys, xs = np.nonzero(line)
        assert xs.min() >= 10 and xs.max() <= 70

    def test_deterministic(self):
        a, b = self.images()
        k = [ft.Keypoint(PixelPoint(20, 20), 1.0)]
        m = [ft.Match(0, 0, 0)]
        assert ft.render_matches(a, b, k, k, m) == ft.render_matches(a, b, k, k, m)


def test_dumps():
    kps = [ft.Keypoint(PixelPoint(17, 18), 250.0, 0.5)]
    text = ft.keypoints_csv(kps)
    assert text.splitlines()[0] == "x,y,score,theta"
    assert text.splitlines()[1].startswith("17,18,250,")
    bits = np.zeros((2, 8), dtype=np.uint8)
    bits[1, 0] = 1
    assert ft.descriptors_hex(bits) == "00\n80\n"


def test_edge_image_invariant_to_inversion():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (40, 40)).astype(np.uint8)
    a = ft.edge_image(gray(img), 1.0)
    b = ft.edge_image(gray(255 - img), 1.0)
    assert a == b
    assert not ft.edge_image(gray(canvas())).data.any()
