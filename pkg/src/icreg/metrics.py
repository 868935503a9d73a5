"""Segmentation overlap, surface distances, landmark errors, and fusion.

Overlap metrics per label L, with TP/FP/FN counted voxel-wise between a
predicted and a ground-truth label map:

* DSC = 2 TP / (2 TP + FP + FN)
* SEN = TP / (TP + FN)
* PPV = TP / (TP + FP), defined as 0 when nothing was predicted

The queried label must appear in the ground truth.

Surface distances operate on boundary voxels: a mask voxel is boundary
when at least one of its six face neighbors is background (the outside
of the grid counts as background). Distances are Euclidean in voxel
units, found by exhaustive nearest-neighbor search; the average surface
distance is the mean of the two directed mean distances and the
Hausdorff distance is the larger of the two directed maxima.

Label fusion is per-voxel majority voting over atlas segmentations,
with ties resolved toward the smallest label value. Landmark
propagation maps each atlas landmark x to ``x + flow(x)`` using the
flow whose direction warps the test volume toward that atlas, then
averages the mapped positions across atlases.
"""

from __future__ import annotations

import numpy as np

from .sampler import map_point
from .volume import LabelMap, Volume, as_flow


def _check_same_grid(pred: LabelMap, truth: LabelMap) -> None:
    if tuple(pred.extents) != tuple(truth.extents):
        raise ValueError(
            f"label maps live on different grids: {tuple(pred.extents)} vs {tuple(truth.extents)}"
        )


def overlap_metrics(pred: LabelMap, truth: LabelMap, label: int) -> tuple[float, float, float]:
    """Return (DSC, SEN, PPV) for one label."""
    _check_same_grid(pred, truth)
    label = int(label)
    truth_mask = truth.labels == label
    if not truth_mask.any():
        raise ValueError(f"label {label} does not appear in the ground truth")
    pred_mask = pred.labels == label
    tp = int(np.count_nonzero(pred_mask & truth_mask))
    fp = int(np.count_nonzero(pred_mask & ~truth_mask))
    fn = int(np.count_nonzero(~pred_mask & truth_mask))
    dsc = 2.0 * tp / (2.0 * tp + fp + fn)
    sen = tp / (tp + fn)
    ppv = 0.0 if tp + fp == 0 else tp / (tp + fp)
    return dsc, sen, ppv


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Integer coordinates of boundary voxels of a boolean mask.

    A voxel belongs to the surface when any of its 6 face neighbors is
    outside the mask; grid borders count as outside.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {mask.shape}")
    neighbors_inside = np.ones_like(mask)
    for axis in range(3):
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        src[axis] = slice(1, None)
        dst[axis] = slice(None, -1)
        # Zero-initialized shifts make out-of-grid neighbors background.
        fwd = np.zeros_like(mask)
        bwd = np.zeros_like(mask)
        fwd[tuple(dst)] = mask[tuple(src)]
        bwd[tuple(src)] = mask[tuple(dst)]
        neighbors_inside &= fwd & bwd
    surface = mask & ~neighbors_inside
    return np.argwhere(surface).astype(np.float64)


def _directed_min_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-voxel Euclidean distance from each src point to its nearest dst.

    Exhaustive search, chunked to bound the distance-matrix memory.
    """
    out = np.empty(len(src), dtype=np.float64)
    chunk = max(1, 2_000_000 // max(1, len(dst)))
    for start in range(0, len(src), chunk):
        block = src[start : start + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def surface_distances(pred: LabelMap, truth: LabelMap, label: int) -> tuple[float, float]:
    """Return (average surface distance, Hausdorff distance) for one label."""
    _check_same_grid(pred, truth)
    label = int(label)
    pred_surface = surface_voxels(pred.labels == label)
    truth_surface = surface_voxels(truth.labels == label)
    if len(pred_surface) == 0 or len(truth_surface) == 0:
        raise ValueError(f"label {label} has an empty mask; surface distances are undefined")
    d_pt = _directed_min_distances(pred_surface, truth_surface)
    d_tp = _directed_min_distances(truth_surface, pred_surface)
    asd = 0.5 * (float(d_pt.mean()) + float(d_tp.mean()))
    hd = max(float(d_pt.max()), float(d_tp.max()))
    return asd, hd


def landmark_error(pred, truth) -> tuple[np.ndarray, float]:
    """Euclidean error per landmark plus the mean over landmarks."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(
            f"landmark sets must share shape (k, 3), got {pred.shape} and {truth.shape}"
        )
    errors = np.sqrt(((pred - truth) ** 2).sum(axis=1))
    mean = float(errors.mean()) if len(errors) else 0.0
    return errors, mean


def multi_atlas_segment(labelmaps) -> LabelMap:
    """Fuse propagated atlas segmentations by per-voxel majority vote.

    Ties go to the smallest label value, which also makes the result
    deterministic regardless of atlas order.
    """
    labelmaps = list(labelmaps)
    if not labelmaps:
        raise ValueError("majority voting needs at least one label map")
    extents = tuple(labelmaps[0].extents)
    for lm in labelmaps[1:]:
        if tuple(lm.extents) != extents:
            raise ValueError("label maps live on different grids")
    stack = np.stack([lm.labels for lm in labelmaps])
    values = np.unique(stack)
    counts = np.stack([(stack == v).sum(axis=0) for v in values])
    # argmax picks the first maximum; `values` is ascending, so ties
    # resolve toward the smallest label.
    winner = np.argmax(counts, axis=0)
    return LabelMap(values[winner])


def propagate_landmarks(per_atlas) -> np.ndarray:
    """Average atlas landmarks mapped through their test-to-atlas flows.

    ``per_atlas`` is a sequence of ``(flow, landmarks)`` tuples. Each
    flow must be the direction whose warp carries the test volume toward
    that atlas, so grid point x of the atlas corresponds to test point
    ``x + flow(x)``. All landmark sets must have the same cardinality
    and ordering.
    """
    per_atlas = list(per_atlas)
    if not per_atlas:
        raise ValueError("landmark propagation needs at least one atlas")
    k = None
    mapped_sets = []
    for flow, landmarks in per_atlas:
        as_flow(flow)
        pts = np.asarray(landmarks, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"landmarks must have shape (k, 3), got {pts.shape}")
        if k is None:
            k = len(pts)
        elif len(pts) != k:
            raise ValueError(f"atlases disagree on landmark count: {k} vs {len(pts)}")
        mapped_sets.append(np.stack([map_point(flow, p) for p in pts]) if len(pts) else pts)
    return np.mean(np.stack(mapped_sets), axis=0)


def metrics_csv_lines(rows) -> list[str]:
    """Serialize (image, item, metric, value) tuples, one CSV row each."""
    lines = ["image,item,metric,value"]
    for image, item, metric, value in rows:
        lines.append(f"{image},{item},{metric},{repr(float(value))}")
    return lines


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(metrics_csv_lines(rows)) + "\n")
