"""Overlap, surface-distance, landmark, and fusion metrics vs brute force."""

import numpy as np
import pytest

import _oracles
from icreg.metrics import (
    landmark_error,
    metrics_csv_lines,
    multi_atlas_segment,
    overlap_metrics,
    propagate_landmarks,
    surface_distances,
    surface_voxels,
    write_metrics_csv,
)
from icreg.volume import LabelMap, Volume


def random_labelmap(rng, extent=8, labels=3):
    data = rng.integers(0, labels, size=(extent, extent, extent)).astype(np.uint16)
    return LabelMap(data)


def cube_mask(extent, lo, hi):
    mask = np.zeros((extent, extent, extent), dtype=bool)
    mask[lo:hi, lo:hi, lo:hi] = True
    return mask


class TestOverlapMetrics:
    def test_hand_case_nested_cubes(self):
        truth = np.zeros((6, 6, 6), dtype=np.uint16)
        truth[1:4, 1:4, 1:4] = 1
        pred = np.zeros((6, 6, 6), dtype=np.uint16)
        pred[1:3, 1:3, 1:3] = 1
        dsc, sen, ppv = overlap_metrics(LabelMap(pred), LabelMap(truth), 1)
        assert dsc == 16.0 / 35.0      # tp=8, fp=0, fn=19
        assert sen == 8.0 / 27.0
        assert ppv == 1.0

    def test_perfect_prediction(self, rng):
        lm = random_labelmap(rng)
        assert 1 in lm.labels
        assert overlap_metrics(lm, lm, 1) == (1.0, 1.0, 1.0)

    def test_empty_prediction_scores_zero(self):
        truth = np.zeros((4, 4, 4), dtype=np.uint16)
        truth[0, 0, 0] = 2
        pred = np.zeros((4, 4, 4), dtype=np.uint16)
        dsc, sen, ppv = overlap_metrics(LabelMap(pred), LabelMap(truth), 2)
        assert (dsc, sen, ppv) == (0.0, 0.0, 0.0)

    def test_matches_brute_force_exactly(self, rng):
        for _ in range(10):
            pred, truth = random_labelmap(rng), random_labelmap(rng)
            for label in (0, 1, 2):
                got = overlap_metrics(pred, truth, label)
                assert got == _oracles.overlap_metrics(pred.labels, truth.labels, label)

    def test_label_missing_from_truth(self, rng):
        pred, truth = random_labelmap(rng), random_labelmap(rng)
        with pytest.raises(ValueError, match="ground truth"):
            overlap_metrics(pred, truth, 9)

    def test_grid_mismatch(self, rng):
        pred = random_labelmap(rng, extent=8)
        truth = random_labelmap(rng, extent=6)
        with pytest.raises(ValueError, match="grids"):
            overlap_metrics(pred, truth, 1)


class TestSurfaceVoxels:
    def test_cube_surface_excludes_interior(self):
        mask = cube_mask(5, 1, 4)
        surface = surface_voxels(mask)
        assert len(surface) == 26          # 3^3 cube minus its single interior voxel
        assert (surface == [2.0, 2.0, 2.0]).all(axis=1).sum() == 0

    def test_grid_border_counts_as_outside(self):
        surface = surface_voxels(np.ones((4, 4, 4), dtype=bool))
        assert len(surface) == 64 - 8      # only the 2^3 core is interior

    def test_single_voxel_is_its_own_surface(self):
        mask = np.zeros((3, 3, 3), dtype=bool)
        mask[1, 2, 0] = True
        np.testing.assert_array_equal(surface_voxels(mask), [[1.0, 2.0, 0.0]])

    def test_matches_brute_force_in_order(self, rng):
        for _ in range(10):
            mask = rng.random((6, 6, 6)) < 0.4
            np.testing.assert_array_equal(surface_voxels(mask), _oracles.surface_points(mask))

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            surface_voxels(np.ones((4, 4), dtype=bool))


class TestSurfaceDistances:
    def test_identical_masks_have_zero_distance(self, rng):
        lm = random_labelmap(rng)
        assert surface_distances(lm, lm, 1) == (0.0, 0.0)

    def test_single_voxel_offset(self):
        pred = np.zeros((5, 5, 5), dtype=np.uint16)
        truth = np.zeros((5, 5, 5), dtype=np.uint16)
        pred[1, 1, 1] = 1
        truth[4, 1, 1] = 1
        asd, hd = surface_distances(LabelMap(pred), LabelMap(truth), 1)
        assert (asd, hd) == (3.0, 3.0)

    def test_pythagorean_pair(self):
        pred = np.zeros((6, 6, 6), dtype=np.uint16)
        truth = np.zeros((6, 6, 6), dtype=np.uint16)
        pred[0, 0, 0] = 1
        truth[3, 4, 0] = 1
        asd, hd = surface_distances(LabelMap(pred), LabelMap(truth), 1)
        assert (asd, hd) == (5.0, 5.0)

    def test_matches_brute_force_exactly(self, rng):
        for _ in range(5):
            pred = LabelMap((rng.random((7, 7, 7)) < 0.4).astype(np.uint16))
            truth = LabelMap((rng.random((7, 7, 7)) < 0.4).astype(np.uint16))
            got = surface_distances(pred, truth, 1)
            expected = _oracles.surface_distances(pred.labels == 1, truth.labels == 1)
            assert got == expected

    def test_empty_mask_is_rejected(self):
        pred = np.zeros((4, 4, 4), dtype=np.uint16)
        truth = np.zeros((4, 4, 4), dtype=np.uint16)
        truth[1, 1, 1] = 1
        with pytest.raises(ValueError, match="empty"):
            surface_distances(LabelMap(pred), LabelMap(truth), 1)


class TestLandmarkError:
    def test_hand_cases(self):
        pred = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        truth = np.array([[1.0, 2.0, 7.0], [3.0, 4.0, 0.0]])
        errors, mean = landmark_error(pred, truth)
        np.testing.assert_array_equal(errors, [4.0, 5.0])
        assert mean == 4.5

    def test_empty_sets(self):
        errors, mean = landmark_error(np.zeros((0, 3)), np.zeros((0, 3)))
        assert len(errors) == 0
        assert mean == 0.0

    @pytest.mark.parametrize("pred,truth", [
        (np.zeros((2, 3)), np.zeros((3, 3))),
        (np.zeros((2, 2)), np.zeros((2, 2))),
        (np.zeros(3), np.zeros(3)),
    ])
    def test_rejects_bad_shapes(self, pred, truth):
        with pytest.raises(ValueError):
            landmark_error(pred, truth)


class TestMultiAtlasSegment:
    def test_majority_and_tie_break(self):
        maps = [
            LabelMap(np.array([[[1, 2]]], dtype=np.uint16).repeat(2, axis=0).repeat(2, axis=1)),
            LabelMap(np.array([[[1, 3]]], dtype=np.uint16).repeat(2, axis=0).repeat(2, axis=1)),
            LabelMap(np.array([[[4, 3]]], dtype=np.uint16).repeat(2, axis=0).repeat(2, axis=1)),
        ]
        fused = multi_atlas_segment(maps)
        assert fused.labels[0, 0, 0] == 1      # clear majority
        assert fused.labels[0, 0, 1] == 3      # 3 beats 2 two-to-one

    def test_tie_goes_to_smallest_label(self):
        a = LabelMap(np.full((2, 2, 2), 5, dtype=np.uint16))
        b = LabelMap(np.full((2, 2, 2), 2, dtype=np.uint16))
        fused = multi_atlas_segment([a, b])
        assert (fused.labels == 2).all()

    def test_matches_brute_force(self, rng):
        for n_atlases in (3, 4):
            maps = [random_labelmap(rng, extent=5, labels=4) for _ in range(n_atlases)]
            fused = multi_atlas_segment(maps)
            expected = _oracles.majority_vote([m.labels for m in maps])
            np.testing.assert_array_equal(fused.labels, expected)

    def test_atlas_order_is_irrelevant(self, rng):
        maps = [random_labelmap(rng, extent=4, labels=4) for _ in range(3)]
        fused = multi_atlas_segment(maps)
        shuffled = multi_atlas_segment(maps[::-1])
        np.testing.assert_array_equal(fused.labels, shuffled.labels)

    def test_rejects_empty_and_mismatched(self, rng):
        with pytest.raises(ValueError, match="at least one"):
            multi_atlas_segment([])
        with pytest.raises(ValueError, match="grids"):
            multi_atlas_segment([random_labelmap(rng, 4), random_labelmap(rng, 5)])


class TestPropagateLandmarks:
    def constant_flow_volume(self, t, extent=6):
        flow = np.zeros((3, extent, extent, extent))
        flow += np.asarray(t, dtype=np.float64).reshape(3, 1, 1, 1)
        return Volume(flow)

    def test_single_atlas_integer_translation(self):
        flow = self.constant_flow_volume((1.0, -2.0, 0.0))
        landmarks = np.array([[2.0, 3.0, 1.0], [4.0, 4.0, 4.0]])
        mapped = propagate_landmarks([(flow, landmarks)])
        np.testing.assert_array_equal(mapped, landmarks + [1.0, -2.0, 0.0])

    def test_two_atlases_average(self):
        f1 = self.constant_flow_volume((2.0, 0.0, 0.0))
        f2 = self.constant_flow_volume((0.0, 4.0, 0.0))
        landmarks = np.array([[1.0, 1.0, 1.0]])
        mapped = propagate_landmarks([(f1, landmarks), (f2, landmarks)])
        np.testing.assert_array_equal(mapped, [[2.0, 3.0, 1.0]])

    def test_empty_landmark_sets(self):
        flow = self.constant_flow_volume((1.0, 1.0, 1.0))
        mapped = propagate_landmarks([(flow, np.zeros((0, 3)))])
        assert mapped.shape == (0, 3)

    def test_rejects_count_mismatch(self):
        flow = self.constant_flow_volume((0.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="count"):
            propagate_landmarks([(flow, np.zeros((2, 3))), (flow, np.zeros((3, 3)))])

    def test_rejects_empty_and_bad_shapes(self):
        with pytest.raises(ValueError, match="at least one"):
            propagate_landmarks([])
        flow = self.constant_flow_volume((0.0, 0.0, 0.0))
        with pytest.raises(ValueError, match="shape"):
            propagate_landmarks([(flow, np.zeros((2, 2)))])


class TestMetricsCsv:
    def test_lines_and_file(self, tmp_path):
        rows = [("img0", "label_1", "dsc", 0.75), ("img0", "pair", "landmark", 1.0 / 3.0)]
        lines = metrics_csv_lines(rows)
        assert lines[0] == "image,item,metric,value"
        assert lines[1] == "img0,label_1,dsc,0.75"
        assert lines[2] == f"img0,pair,landmark,{repr(1.0 / 3.0)}"
        path = tmp_path / "metrics.csv"
        write_metrics_csv(rows, path)
        assert path.read_text(encoding="ascii") == "\n".join(lines) + "\n"
