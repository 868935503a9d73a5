"""Container validation, on-disk byte layout, and image export."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icreg.volume import (
    DimensionError,
    FormatError,
    GridShape,
    LabelMap,
    TruncatedError,
    Volume,
    as_flow,
    export_slice,
    load_labelmap,
    load_landmarks,
    load_volume,
    save_labelmap,
    save_landmarks,
    save_volume,
    zscore_normalize,
)


class TestGridShape:
    def test_extents_and_voxels(self):
        g = GridShape(2, 3, 4)
        assert g.extents == (2, 3, 4)
        assert g.num_voxels == 24

    @pytest.mark.parametrize("bad", [(1, 2, 2), (2, 0, 2), (2, 2, -3)])
    def test_rejects_tiny_axes(self, bad):
        with pytest.raises(DimensionError):
            GridShape(*bad)

    @pytest.mark.parametrize("bad", [2.0, "2", True, None])
    def test_rejects_non_integers(self, bad):
        with pytest.raises(DimensionError):
            GridShape(bad, 2, 2)

    def test_rejects_absurd_sizes(self):
        with pytest.raises(DimensionError):
            GridShape(1 << 20, 1 << 20, 2)


class TestVolume:
    def test_scalar_array_becomes_one_channel(self, rng):
        data = rng.standard_normal((4, 5, 6))
        vol = Volume(data)
        assert vol.channels == 1
        assert vol.extents == (4, 5, 6)
        np.testing.assert_array_equal(vol.data[0], data)

    def test_multichannel_kept(self, rng):
        vol = Volume(rng.standard_normal((3, 4, 4, 4)))
        assert vol.channels == 3
        assert vol.grid == GridShape(4, 4, 4)

    def test_copies_input(self, rng):
        data = rng.standard_normal((4, 4, 4))
        vol = Volume(data)
        data[0, 0, 0] = 99.0
        assert vol.data[0, 0, 0, 0] != 99.0

    def test_immutable(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(AttributeError):
            vol.data = None
        with pytest.raises(ValueError):
            vol.data[0, 0, 0, 0] = 1.0

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((4, 4)))
        with pytest.raises(ValueError):
            Volume(np.zeros((1, 1, 4, 4, 4)))

    def test_rejects_non_finite(self):
        data = np.zeros((4, 4, 4))
        data[1, 2, 3] = np.nan
        with pytest.raises(ValueError):
            Volume(data)

    def test_channel_accessor(self, rng):
        data = rng.standard_normal((2, 4, 4, 4))
        vol = Volume(data)
        np.testing.assert_array_equal(vol.channel(1), data[1])


class TestLabelMap:
    def test_stores_uint16(self):
        lm = LabelMap(np.arange(8, dtype=np.int64).reshape(2, 2, 2))
        assert lm.labels.dtype == np.uint16
        assert lm.extents == (2, 2, 2)

    def test_rejects_floats(self):
        with pytest.raises(ValueError):
            LabelMap(np.zeros((2, 2, 2), dtype=np.float64))

    @pytest.mark.parametrize("value", [-1, 70000])
    def test_rejects_out_of_range(self, value):
        arr = np.zeros((2, 2, 2), dtype=np.int64)
        arr[0, 0, 0] = value
        with pytest.raises(ValueError):
            LabelMap(arr)

    def test_immutable(self):
        lm = LabelMap(np.zeros((2, 2, 2), dtype=np.int64))
        with pytest.raises(AttributeError):
            lm.labels = None


class TestAsFlow:
    def test_accepts_three_channels(self, rng):
        flow = Volume(rng.standard_normal((3, 4, 4, 4)))
        assert as_flow(flow) is flow

    def test_rejects_other_channel_counts(self, rng):
        with pytest.raises(ValueError):
            as_flow(Volume(rng.standard_normal((4, 4, 4))))

    def test_rejects_non_volume(self):
        with pytest.raises(TypeError):
            as_flow(np.zeros((3, 4, 4, 4)))


def header_bytes(magic=b"ICVOL1", dims=b"dims 2 2 2", channels=b"channels 1", dtype=b"dtype f32"):
    return b"\n".join([magic, dims, channels, dtype, b"data"]) + b"\n"


class TestVolumeFileLayout:
    def test_frozen_bytes(self, tmp_path):
        # data[0, x, y, z] = 4x + 2y + z lets the payload order be read
        # off directly: x varies fastest on disk, then y, then z.
        data = np.zeros((2, 2, 2))
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    data[x, y, z] = 4 * x + 2 * y + z
        path = tmp_path / "v.icvol"
        save_volume(Volume(data), path)
        expected = header_bytes() + struct.pack("<8f", 0, 4, 2, 6, 1, 5, 3, 7)
        assert path.read_bytes() == expected

    def test_frozen_labelmap_bytes(self, tmp_path):
        labels = np.zeros((2, 2, 2), dtype=np.int64)
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    labels[x, y, z] = 4 * x + 2 * y + z
        path = tmp_path / "l.icvol"
        save_labelmap(LabelMap(labels), path)
        expected = header_bytes(dtype=b"dtype u16") + struct.pack("<8H", 0, 4, 2, 6, 1, 5, 3, 7)
        assert path.read_bytes() == expected

    def test_round_trip_is_float32_exact(self, tmp_path, rng):
        data = rng.standard_normal((3, 4, 5, 6))
        path = tmp_path / "v.icvol"
        save_volume(Volume(data), path)
        loaded = load_volume(path)
        np.testing.assert_array_equal(loaded.data, data.astype("<f4").astype(np.float64))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_any_seed(self, seed):
        import tempfile

        g = np.random.default_rng(seed)
        data = g.uniform(-100.0, 100.0, size=(2, 3, 2, 4))
        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/v.icvol"
            save_volume(Volume(data), path)
            loaded = load_volume(path)
        np.testing.assert_array_equal(loaded.data, data.astype("<f4").astype(np.float64))

    def test_labelmap_round_trip(self, tmp_path, rng):
        labels = rng.integers(0, 5, size=(4, 3, 5))
        path = tmp_path / "l.icvol"
        save_labelmap(LabelMap(labels), path)
        np.testing.assert_array_equal(load_labelmap(path).labels, labels)


def write_file(tmp_path, payload):
    path = tmp_path / "bad.icvol"
    path.write_bytes(payload)
    return path


class TestVolumeFileErrors:
    def test_bad_magic(self, tmp_path):
        path = write_file(tmp_path, header_bytes(magic=b"NOPE42"))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_unterminated_header_line(self, tmp_path):
        path = write_file(tmp_path, b"ICVOL1")
        with pytest.raises(FormatError):
            load_volume(path)

    def test_wrong_dims_arity(self, tmp_path):
        path = write_file(tmp_path, header_bytes(dims=b"dims 2 2"))
        with pytest.raises(FormatError):
            load_volume(path)

    @pytest.mark.parametrize("dims", [b"dims a 2 2", b"dims -1 2 2", b"dims 2.0 2 2"])
    def test_non_count_dims(self, tmp_path, dims):
        path = write_file(tmp_path, header_bytes(dims=dims))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_axis_below_minimum(self, tmp_path):
        path = write_file(tmp_path, header_bytes(dims=b"dims 1 2 2"))
        with pytest.raises(DimensionError):
            load_volume(path)

    def test_zero_channels(self, tmp_path):
        path = write_file(tmp_path, header_bytes(channels=b"channels 0"))
        with pytest.raises(DimensionError):
            load_volume(path)

    def test_unknown_dtype(self, tmp_path):
        path = write_file(tmp_path, header_bytes(dtype=b"dtype f64"))
        with pytest.raises(FormatError):
            load_volume(path)

    def test_missing_data_marker(self, tmp_path):
        payload = b"ICVOL1\ndims 2 2 2\nchannels 1\ndtype f32\nblob\n"
        path = write_file(tmp_path, payload)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_oversized_header_rejected_before_read(self, tmp_path):
        # No payload follows; the size guard must fire on the header alone.
        path = write_file(tmp_path, header_bytes(dims=b"dims 2097152 2048 2048"))
        with pytest.raises(DimensionError):
            load_volume(path)

    def test_truncated_payload(self, tmp_path):
        path = write_file(tmp_path, header_bytes() + b"\x00" * 31)
        with pytest.raises(TruncatedError):
            load_volume(path)

    def test_trailing_bytes(self, tmp_path):
        path = write_file(tmp_path, header_bytes() + b"\x00" * 33)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_non_finite_payload(self, tmp_path):
        payload = struct.pack("<8f", 0, 0, 0, np.inf, 0, 0, 0, 0)
        path = write_file(tmp_path, header_bytes() + payload)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_volume_loader_rejects_u16(self, tmp_path):
        path = write_file(tmp_path, header_bytes(dtype=b"dtype u16") + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_volume(path)

    def test_labelmap_loader_rejects_f32(self, tmp_path):
        path = write_file(tmp_path, header_bytes() + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_labelmap(path)

    def test_labelmap_loader_rejects_multichannel(self, tmp_path):
        payload = header_bytes(channels=b"channels 2", dtype=b"dtype u16") + b"\x00" * 32
        path = write_file(tmp_path, payload)
        with pytest.raises(FormatError):
            load_labelmap(path)


class TestLandmarks:
    def test_frozen_text(self, tmp_path):
        path = tmp_path / "lm.txt"
        save_landmarks([(1.5, 2.25, 3.0)], path)
        assert path.read_text() == "1.5 2.25 3\n"

    def test_round_trip_exact(self, tmp_path, rng):
        pts = rng.uniform(-50.0, 50.0, size=(7, 3))
        path = tmp_path / "lm.txt"
        save_landmarks(pts, path)
        np.testing.assert_array_equal(load_landmarks(path), pts)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.floats(-1e12, 1e12),
                st.floats(-1e12, 1e12),
                st.floats(-1e12, 1e12),
            ),
            max_size=5,
        )
    )
    def test_round_trip_property(self, points):
        import tempfile

        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/lm.txt"
            save_landmarks(pts, path)
            loaded = load_landmarks(path)
        np.testing.assert_array_equal(loaded, pts)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text("1 2 3\n\n  \n4 5 6\n")
        assert load_landmarks(path).shape == (2, 3)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text("")
        assert load_landmarks(path).shape == (0, 3)

    @pytest.mark.parametrize("line", ["1 2", "1 2 3 4", "1 2 x", "1 2 nan"])
    def test_malformed_lines(self, tmp_path, line):
        path = tmp_path / "lm.txt"
        path.write_text(line + "\n")
        with pytest.raises(FormatError):
            load_landmarks(path)


class TestZscore:
    def test_normalizes_population_moments(self, rng):
        vol = Volume(rng.uniform(5.0, 9.0, size=(6, 6, 6)))
        out = zscore_normalize(vol)
        assert abs(out.data.mean()) < 1e-12
        assert abs(out.data.std() - 1.0) < 1e-12

    def test_constant_maps_to_zeros(self):
        out = zscore_normalize(Volume(np.full((4, 4, 4), 3.5)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4, 4, 4)))

    def test_rejects_multichannel(self, rng):
        with pytest.raises(ValueError):
            zscore_normalize(Volume(rng.standard_normal((3, 4, 4, 4))))


def read_netpbm(path):
    raw = path.read_bytes()
    magic, rest = raw.split(b"\n", 1)
    size, rest = rest.split(b"\n", 1)
    maxval, pixels = rest.split(b"\n", 1)
    width, height = (int(t) for t in size.split())
    return magic.decode(), width, height, int(maxval), pixels


class TestExportSlice:
    def test_scalar_slice_geometry_and_scaling(self, tmp_path, rng):
        data = rng.uniform(0.0, 10.0, size=(5, 4, 3))
        path = tmp_path / "slice.pgm"
        export_slice(Volume(data), "z", 1, path)
        magic, width, height, maxval, pixels = read_netpbm(path)
        assert (magic, maxval) == ("P5", 255)
        # x runs along columns and y along rows for a z slice.
        assert (width, height) == (5, 4)
        plane = data[:, :, 1]
        lo, hi = plane.min(), plane.max()
        expected = np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
        img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
        np.testing.assert_array_equal(img, expected.T)
        bounds = (tmp_path / "slice.pgm.bounds.txt").read_text().split()
        assert [float(bounds[0]), float(bounds[1])] == [pytest.approx(lo), pytest.approx(hi)]

    def test_flow_slice_symmetric_scaling(self, tmp_path):
        data = np.zeros((3, 2, 2, 2))
        data[0, :, :, 0] = [[-2.0, 0.0], [1.0, 2.0]]
        path = tmp_path / "slice.ppm"
        export_slice(Volume(data), 2, 0, path)
        magic, width, height, maxval, pixels = read_netpbm(path)
        assert (magic, width, height) == ("P6", 2, 2)
        img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
        # Channel 0 scales symmetrically over [-2, 2]; zero displacement
        # lands mid-gray, which also covers the constant channels 1 and 2.
        assert img[0, 0, 0] == 0
        assert img[0, 1, 0] == round(255 * 3 / 4)
        assert img[1, 0, 0] == 128
        assert img[1, 1, 0] == 255
        assert (img[:, :, 1] == 128).all() and (img[:, :, 2] == 128).all()
        bounds = [float(t) for t in (tmp_path / "slice.ppm.bounds.txt").read_text().split()]
        assert bounds == [-2.0, 2.0, 0.0, 0.0, 0.0, 0.0]

    def test_axis_names_match_indices(self, tmp_path, rng):
        vol = Volume(rng.uniform(0.0, 1.0, size=(4, 5, 6)))
        export_slice(vol, "y", 2, tmp_path / "by_name.pgm")
        export_slice(vol, 1, 2, tmp_path / "by_index.pgm")
        assert (tmp_path / "by_name.pgm").read_bytes() == (tmp_path / "by_index.pgm").read_bytes()

    def test_index_out_of_range(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(IndexError):
            export_slice(vol, "x", 4, tmp_path / "x.pgm")

    @pytest.mark.parametrize("axis", ["w", 3, -1])
    def test_bad_axis(self, tmp_path, rng, axis):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(ValueError):
            export_slice(vol, axis, 0, tmp_path / "x.pgm")

    def test_bad_channel_count(self, tmp_path, rng):
        vol = Volume(rng.standard_normal((2, 4, 4, 4)))
        with pytest.raises(ValueError):
            export_slice(vol, "z", 0, tmp_path / "x.pgm")
