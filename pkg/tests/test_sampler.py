"""Trilinear warping, nearest-neighbor label warping, and flow inversion."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _oracles
from icreg.sampler import (
    base_grid,
    estimate_inverse,
    map_point,
    trilinear_sample,
    warp,
    warp_nearest,
)
from icreg.volume import LabelMap, Volume


def constant_flow(t, extents):
    t = np.asarray(t, dtype=np.float64)
    return Volume(np.broadcast_to(t[:, None, None, None], (3,) + tuple(extents)).copy())


class TestBaseGrid:
    def test_identity_coordinates(self):
        grid = base_grid((3, 4, 5))
        assert grid.shape == (3, 3, 4, 5)
        assert grid[0, 2, 0, 0] == 2.0
        assert grid[1, 0, 3, 0] == 3.0
        assert grid[2, 0, 0, 4] == 4.0

    def test_cached_and_read_only(self):
        a = base_grid((4, 4, 4))
        assert base_grid((4, 4, 4)) is a
        assert not a.flags.writeable


class TestTrilinearSample:
    def test_exact_on_linear_ramp(self, rng):
        # A trilinear interpolant reproduces any affine field exactly at
        # dyadic query points.
        grid = base_grid((6, 6, 6))
        data = 2.0 * grid[0] + 3.0 * grid[1] - grid[2] + 0.25
        vol = Volume(data)
        value = trilinear_sample(vol, (1.5, 2.25, 3.0))
        assert value[0] == 2.0 * 1.5 + 3.0 * 2.25 - 3.0 + 0.25

    def test_matches_oracle_on_random_points(self, rng):
        vol = Volume(rng.standard_normal((2, 5, 6, 4)))
        for _ in range(50):
            pt = rng.uniform(-2.0, 8.0, size=3)
            expected = _oracles.trilinear(vol.data, pt)
            np.testing.assert_allclose(trilinear_sample(vol, pt), expected, atol=1e-12)

    def test_clamps_to_border(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        far = trilinear_sample(vol, (100.0, -50.0, 100.0))
        assert far[0] == vol.data[0, 3, 0, 3]

    def test_rejects_non_finite_point(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(ValueError):
            trilinear_sample(vol, (np.nan, 0.0, 0.0))


class TestWarp:
    def test_zero_flow_is_identity_exactly(self, rng):
        vol = Volume(rng.standard_normal((2, 6, 5, 4)))
        out = warp(vol, constant_flow((0.0, 0.0, 0.0), (6, 5, 4)))
        np.testing.assert_array_equal(out.data, vol.data)

    def test_integer_translation_matches_index_shift(self, rng):
        vol = Volume(rng.standard_normal((7, 7, 7)))
        out = warp(vol, constant_flow((2.0, -1.0, 3.0), (7, 7, 7)))
        # Interior voxels, where p + t stays on the grid, must equal the
        # directly indexed source voxel.
        np.testing.assert_array_equal(
            out.data[0, :5, 1:, :4], vol.data[0, 2:, :6, 3:]
        )

    def test_fractional_translation_matches_oracle(self, rng):
        vol = Volume(rng.standard_normal((6, 6, 6)))
        t = (0.3, -0.7, 1.2)
        out = warp(vol, constant_flow(t, (6, 6, 6)))
        expected = _oracles.warp(vol.data, constant_flow(t, (6, 6, 6)).data)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_random_flow_matches_oracle(self, rng, random_flow):
        vol = Volume(rng.standard_normal((2, 8, 8, 8)))
        out = warp(vol, random_flow)
        expected = _oracles.warp(vol.data, random_flow.data)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_far_flow_samples_border(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        out = warp(vol, constant_flow((100.0, 100.0, 100.0), (4, 4, 4)))
        assert (out.data == vol.data[0, 3, 3, 3]).all()

    def test_extent_mismatch_rejected(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(ValueError):
            warp(vol, constant_flow((0.0, 0.0, 0.0), (4, 4, 5)))

    def test_non_flow_rejected(self, rng):
        vol = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(ValueError):
            warp(vol, vol)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_linear_in_the_image(self, seed):
        g = np.random.default_rng(seed)
        a = g.standard_normal((4, 4, 4))
        b = g.standard_normal((4, 4, 4))
        flow = Volume(g.uniform(-2.0, 2.0, size=(3, 4, 4, 4)))
        combined = warp(Volume(2.0 * a - 3.0 * b), flow).data
        split = 2.0 * warp(Volume(a), flow).data - 3.0 * warp(Volume(b), flow).data
        np.testing.assert_allclose(combined, split, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_constant_volume_stays_constant(self, seed):
        g = np.random.default_rng(seed)
        vol = Volume(np.full((4, 4, 4), 2.75))
        flow = Volume(g.uniform(-3.0, 3.0, size=(3, 4, 4, 4)))
        np.testing.assert_allclose(warp(vol, flow).data, 2.75, atol=1e-12)


class TestWarpNearest:
    def test_integer_translation(self):
        labels = np.arange(27, dtype=np.int64).reshape(3, 3, 3)
        out = warp_nearest(LabelMap(labels), constant_flow((1.0, 0.0, 0.0), (3, 3, 3)))
        np.testing.assert_array_equal(out.labels[:2], labels[1:])
        # Clamped border row repeats the last source plane.
        np.testing.assert_array_equal(out.labels[2], labels[2])

    def test_halfway_rounds_toward_floor(self):
        labels = np.arange(8, dtype=np.int64).reshape(2, 2, 2)
        lm = LabelMap(labels)
        half = warp_nearest(lm, constant_flow((0.5, 0.5, 0.5), (2, 2, 2)))
        np.testing.assert_array_equal(half.labels, labels)
        past = warp_nearest(lm, constant_flow((0.51, 0.0, 0.0), (2, 2, 2)))
        np.testing.assert_array_equal(past.labels[0], labels[1])

    def test_preserves_label_set(self, rng):
        labels = rng.integers(0, 4, size=(6, 6, 6))
        flow = Volume(rng.uniform(-2.0, 2.0, size=(3, 6, 6, 6)))
        out = warp_nearest(LabelMap(labels), flow)
        assert set(np.unique(out.labels)) <= set(np.unique(labels))


class TestEstimateInverse:
    @pytest.mark.parametrize("t", [(1.0, 0.0, 0.0), (2.0, -1.0, 3.0), (0.5, -0.25, 1.75)])
    def test_constant_flow_inverts_exactly(self, t):
        flow = constant_flow(t, (6, 6, 6))
        est = estimate_inverse(flow)
        expected = constant_flow([-v for v in t], (6, 6, 6))
        np.testing.assert_array_equal(est.data, expected.data)

    def test_generic_constant_flow_inverts_to_ulps(self, rng):
        for _ in range(20):
            t = rng.uniform(-3.0, 3.0, size=3)
            est = estimate_inverse(constant_flow(t, (5, 5, 5)))
            np.testing.assert_allclose(est.data, constant_flow(-t, (5, 5, 5)).data, atol=1e-13)

    def test_is_negated_field_warped_by_itself(self, rng, random_flow):
        # The estimate is defined as sampling the negated field at the
        # displaced position, so it must equal a plain backward warp of
        # that negated field.
        est = estimate_inverse(random_flow)
        expected = _oracles.warp(-random_flow.data, random_flow.data)
        np.testing.assert_allclose(est.data, expected, atol=1e-12)

    def test_requires_flow(self, rng):
        with pytest.raises(ValueError):
            estimate_inverse(Volume(rng.standard_normal((4, 4, 4))))


class TestMapPoint:
    def test_zero_flow_fixes_points(self):
        flow = constant_flow((0.0, 0.0, 0.0), (4, 4, 4))
        np.testing.assert_array_equal(map_point(flow, (1.5, 2.0, 3.0)), [1.5, 2.0, 3.0])

    def test_constant_flow_translates(self):
        flow = constant_flow((1.0, -2.0, 0.5), (6, 6, 6))
        np.testing.assert_allclose(
            map_point(flow, (2.0, 3.0, 4.0)), [3.0, 1.0, 4.5], atol=1e-12
        )
