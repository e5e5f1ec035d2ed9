import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msfusion.errors import (
    CorruptHeaderError,
    DuplicateFrameIdError,
    InvalidTimestampError,
    InvariantError,
    MissingColumnError,
    MissingFileError,
    UnsupportedFormatError,
    UnwritablePathError,
)
from msfusion.imgcore import (
    FrameRecord,
    ImageBuffer,
    PixelPoint,
    ValidityMask,
    load_image,
    normalize_16_to_8,
    parse_manifest,
    round_half_away,
    save_image,
    to_gray8,
    to_grayscale,
)


def test_round_half_away_from_zero():
    assert list(round_half_away([0.5, 1.5, 2.5, -0.5, -2.5, 2.4999])) == [1, 2, 3, -1, -3, 2]


class TestImageBuffer:
    def test_from_samples_row_major(self):
        b = ImageBuffer.from_samples([0, 255, 128, 7], 2, 2)
        assert b.data.tolist() == [[0, 255], [128, 7]]
        assert (b.width, b.height, b.channels, b.depth) == (2, 2, 1, 8)

    def test_rejects_out_of_range_samples(self):
        with pytest.raises(InvariantError):
            ImageBuffer.from_samples([0, 256], 2, 1)

    def test_rejects_wrong_length(self):
        with pytest.raises(InvariantError):
            ImageBuffer.from_samples([0, 1, 2], 2, 2)

    def test_rejects_zero_size(self):
        with pytest.raises(InvariantError):
            ImageBuffer(np.zeros((0, 5), dtype=np.uint8))

    def test_rejects_float_data_and_two_channels(self):
        with pytest.raises(InvariantError):
            ImageBuffer(np.zeros((2, 2)))
        with pytest.raises(InvariantError):
            ImageBuffer(np.zeros((2, 2, 2), dtype=np.uint8))

    def test_is_immutable(self):
        src = np.zeros((2, 2), dtype=np.uint8)
        b = ImageBuffer(src)
        src[0, 0] = 9
        assert b.data[0, 0] == 0
        with pytest.raises(ValueError):
            b.data[0, 0] = 1


def test_pixel_point_requires_finite():
    with pytest.raises(InvariantError):
        PixelPoint(float("nan"), 0.0)


def test_frame_record_rejects_negative_time():
    with pytest.raises(InvalidTimestampError):
        FrameRecord("f", -0.1, "a.png")


def test_validity_mask_matches():
    m = ValidityMask.full(4, 3)
    assert m.count() == 12
    assert m.matches(ImageBuffer(np.zeros((3, 4), dtype=np.uint8)))
    assert not m.matches(ImageBuffer(np.zeros((4, 3), dtype=np.uint8)))


class TestFileIO:
    def test_plain_pgm_fixture(self, tmp_path):
        p = tmp_path / "tiny.pgm"
        p.write_text("P2\n# fixture\n2 2\n255\n0 255\n128 7\n")
        assert load_image(p).samples().tolist() == [0, 255, 128, 7]

    @pytest.mark.parametrize("suffix", [".png", ".pgm"])
    def test_16bit_round_trip(self, tmp_path, suffix):
        b = ImageBuffer(np.array([[0, 1000], [40000, 65535]], dtype=np.uint16))
        save_image(b, tmp_path / f"x{suffix}")
        back = load_image(tmp_path / f"x{suffix}")
        assert back.depth == 16 and back == b

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_rgb_round_trip_keeps_channel_order(self, tmp_path, suffix):
        data = np.zeros((2, 3, 3), dtype=np.uint8)
        data[0, 0] = (255, 0, 0)
        data[1, 2] = (1, 2, 3)
        b = ImageBuffer(data)
        save_image(b, tmp_path / f"c{suffix}")
        back = load_image(tmp_path / f"c{suffix}")
        assert (back.channels, back.depth) == (3, 8)
        assert back == b

    def test_text_file_is_corrupt_header(self, tmp_path):
        p = tmp_path / "notes.png"
        p.write_text("hello world")
        with pytest.raises(CorruptHeaderError):
            load_image(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_image(tmp_path / "absent.png")

    def test_lossy_rejected(self, tmp_path):
        p = tmp_path / "x.jpg"
        p.write_bytes(b"\xff\xd8\xff\xe0junk")
        with pytest.raises(UnsupportedFormatError):
            load_image(p)
        with pytest.raises(UnsupportedFormatError):
            save_image(ImageBuffer(np.zeros((2, 2), dtype=np.uint8)), p)

    def test_truncated_pgm(self, tmp_path):
        p = tmp_path / "short.pgm"
        p.write_text("P2\n2 2\n255\n0 1 2\n")
        with pytest.raises(CorruptHeaderError):
            load_image(p)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(UnwritablePathError):
            save_image(ImageBuffer(np.zeros((2, 2), dtype=np.uint8)), tmp_path / "no" / "such" / "dir.png")

    @settings(max_examples=25, deadline=None)
    @given(
        data=st.one_of(
            arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))),
            arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6))),
            arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(3))),
            arrays(np.uint16, st.tuples(st.integers(1, 5), st.integers(1, 5), st.just(3))),
        ),
        suffix=st.sampled_from([".png", ".pnm"]),
    )
    def test_round_trip_property(self, tmp_path_factory, data, suffix):
        path = tmp_path_factory.mktemp("rt") / f"img{suffix}"
        b = ImageBuffer(data)
        save_image(b, path)
        assert load_image(path) == b


class TestManifest:
    def test_parses_in_file_order(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("f1,0.00,a.png\nf2,0.10,b.png\n")
        recs = parse_manifest(p)
        assert [r.frame_id for r in recs] == ["f1", "f2"]
        assert [r.t for r in recs] == [0.0, 0.1]

    @pytest.mark.parametrize(
        "text, exc",
        [
            ("f1,0.0,a.png\nf1,0.1,b.png\n", DuplicateFrameIdError),
            ("f1,-1.0,a.png\n", InvalidTimestampError),
            ("f1,abc,a.png\n", InvalidTimestampError),
            ("f1,0.0\n", MissingColumnError),
        ],
    )
    def test_errors(self, tmp_path, text, exc):
        p = tmp_path / "m.csv"
        p.write_text(text)
        with pytest.raises(exc):
            parse_manifest(p)


class TestConversions:
    def test_gray_identity_on_single_channel(self):
        b = ImageBuffer(np.arange(12, dtype=np.uint8).reshape(3, 4))
        assert to_grayscale(b) is b

    @pytest.mark.parametrize("rgb, expected", [((255, 255, 255), 255), ((100, 100, 100), 100), ((0, 0, 0), 0)])
    def test_luma_fixed_points(self, rgb, expected):
        b = ImageBuffer(np.array([[rgb]], dtype=np.uint8))
        assert to_grayscale(b).data[0, 0] == expected

    def test_luma_rounds_half_away(self):
        # 0.299 * 10 + 0.587 * 0 + 0.114 * 5 = 3.56 -> 4
        b = ImageBuffer(np.array([[[10, 0, 5]]], dtype=np.uint8))
        assert to_grayscale(b).data[0, 0] == 4

    def test_normalize_endpoints(self):
        b = ImageBuffer(np.array([[1000, 3000]], dtype=np.uint16))
        assert normalize_16_to_8(b).data.tolist() == [[0, 255]]

    def test_normalize_constant_is_zero(self):
        b = ImageBuffer(np.full((3, 3), 5000, dtype=np.uint16))
        assert not normalize_16_to_8(b).data.any()

    def test_normalize_midpoint(self):
        b = ImageBuffer(np.array([[0, 32768, 65535]], dtype=np.uint16))
        expected = [0, int(np.floor(255 * 32768 / 65535 + 0.5)), 255]
        assert normalize_16_to_8(b).data.ravel().tolist() == expected == [0, 128, 255]

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint16, st.tuples(st.integers(1, 8), st.integers(2, 8))))
    def test_normalize_range_and_monotone(self, data):
        out = normalize_16_to_8(ImageBuffer(data)).data.ravel().astype(int)
        src = data.ravel().astype(int)
        if src.min() != src.max():
            assert out.min() == 0 and out.max() == 255
        order = np.argsort(src, kind="stable")
        assert np.all(np.diff(out[order]) >= 0)

    def test_to_gray8_handles_16bit_rgb(self):
        data = np.zeros((2, 2, 3), dtype=np.uint16)
        data[0, 0] = 60000
        g = to_gray8(ImageBuffer(data))
        assert (g.channels, g.depth) == (1, 8)
        assert g.data[0, 0] == 255 and g.data[1, 1] == 0
