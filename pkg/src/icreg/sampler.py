"""Trilinear sampling, backward warping, and inverse-flow estimation.

Conventions used everywhere in this package:

* Backward warping: ``warp(vol, flow)`` builds its output at grid point
  ``p`` by sampling the input at ``p + flow(p)``. The flow therefore
  points from the output grid into the source volume.
* Out-of-range sample coordinates are clamped to the grid border before
  interpolation (border extension, never zero fill), which makes every
  sampling operation total.
* Coordinates are voxel units; voxel centers sit at integer positions.

The private ``_warp_forward`` / ``_warp_backward`` pair is the single
implementation of trilinear gathering. The public functions wrap it for
Volumes, and the autodiff warp primitive reuses it for gradients.
"""

from __future__ import annotations

import numpy as np

from .volume import LabelMap, Volume, as_flow

_GRID_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def base_grid(extents) -> np.ndarray:
    """Identity coordinate field of shape (3, dx, dy, dz), cached per shape."""
    key = tuple(int(e) for e in extents)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = np.indices(key, dtype=np.float64)
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return grid


def _corner_setup(extents, coords):
    """Clamp flattened coordinates and derive corners and weights.

    ``coords`` is (3, n) here. Returns the low/high corner indices and
    the per-axis weight pair (1 - frac, frac), each of shape (2, 3, n),
    plus the per-axis mask of coordinates that landed inside
    [0, extent - 1] (clamped coordinates have zero derivative with
    respect to the flow).
    """
    limit = np.array([[float(e - 1)] for e in extents])
    c = np.clip(coords, 0.0, limit)
    lo = np.floor(c).astype(np.int64)
    frac = c - lo
    hi = np.minimum(lo + 1, np.array([[e - 1] for e in extents]))
    inside = (coords >= 0.0) & (coords <= limit)
    corners = np.stack((lo, hi))
    axis_weights = np.stack((1.0 - frac, frac))
    return corners, axis_weights, inside


def _warp_forward(data, coords, want_cache=False):
    """Trilinear gather of ``data`` (c, dx, dy, dz) at ``coords`` (3, ...).

    Returns the sampled array of shape ``(c,) + coords.shape[1:]`` and,
    when requested, a cache for the matching backward pass. Corner order
    below treats the x choice as bit 2, y as bit 1, z as bit 0.
    """
    extents = data.shape[1:]
    space = coords.shape[1:]
    n = int(np.prod(space, dtype=np.int64)) if space else 1
    flat_coords = np.ascontiguousarray(coords.reshape(3, n))
    corners, axis_weights, inside = _corner_setup(extents, flat_coords)

    bx, by, bz = np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")
    bits = np.stack([bx.ravel(), by.ravel(), bz.ravel()])
    cx = corners[bits[0], 0]
    cy = corners[bits[1], 1]
    cz = corners[bits[2], 2]
    weights = (
        axis_weights[bits[0], 0] * axis_weights[bits[1], 1] * axis_weights[bits[2], 2]
    )
    values = data[:, cx, cy, cz]
    out = (weights[np.newaxis] * values).sum(axis=1).reshape((data.shape[0],) + space)
    if not want_cache:
        return out, None
    cache = {
        "flat_index": (cx * extents[1] + cy) * extents[2] + cz,
        "weights": weights,
        "values": values,
        "axis_weights": axis_weights,
        "inside": inside,
        "extents": extents,
        "space": space,
        "channels": data.shape[0],
    }
    return out, cache


def _warp_backward(cache, grad, need_image=True, need_flow=True):
    """Adjoints of ``_warp_forward`` given upstream ``grad`` (c, ...)."""
    dx_img = None
    d_coords = None
    extents = cache["extents"]
    space = cache["space"]
    channels = cache["channels"]
    nvox = extents[0] * extents[1] * extents[2]
    grad_flat = np.ascontiguousarray(grad).reshape(channels, -1)

    if need_image:
        flat = cache["flat_index"].ravel()
        weights = cache["weights"]
        dx_img = np.empty((channels, nvox), dtype=np.float64)
        for ch in range(channels):
            contrib = (grad_flat[ch][np.newaxis] * weights).ravel()
            dx_img[ch] = np.bincount(flat, weights=contrib, minlength=nvox)
        dx_img = dx_img.reshape((channels,) + tuple(extents))

    if need_flow:
        # Contract the upstream gradient with the corner values first,
        # then difference across each axis's corner pair, weighting by
        # the two remaining axes' interpolation weights.
        gv = (grad_flat[:, np.newaxis, :] * cache["values"]).sum(axis=0)
        gv = gv.reshape(2, 2, 2, -1)
        wx, wy, wz = (cache["axis_weights"][:, ax] for ax in range(3))
        inside = cache["inside"]
        ddx = ((gv[1] - gv[0]) * (wy[:, np.newaxis] * wz[np.newaxis])).sum(axis=(0, 1))
        ddy = ((gv[:, 1] - gv[:, 0]) * (wx[:, np.newaxis] * wz[np.newaxis])).sum(axis=(0, 1))
        ddz = ((gv[:, :, 1] - gv[:, :, 0]) * (wx[:, np.newaxis] * wy[np.newaxis])).sum(axis=(0, 1))
        d_coords = np.stack((ddx * inside[0], ddy * inside[1], ddz * inside[2]))
        d_coords = d_coords.reshape((3,) + space)
    return dx_img, d_coords


def trilinear_sample(vol: Volume, point) -> np.ndarray:
    """Sample every channel of ``vol`` at one continuous coordinate.

    Returns an array of shape ``(channels,)``. Coordinates outside the
    grid are clamped to the border.
    """
    pt = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.isfinite(pt).all():
        raise ValueError(f"sample point must be finite, got {point!r}")
    out, _ = _warp_forward(vol.data, pt.reshape(3, 1))
    return out[:, 0].copy()


def _check_flow_against(flow: Volume, other_extents, what: str):
    as_flow(flow)
    if tuple(flow.extents) != tuple(other_extents):
        raise ValueError(
            f"flow extents {tuple(flow.extents)} do not match {what} extents {tuple(other_extents)}"
        )


def warp(vol: Volume, flow: Volume) -> Volume:
    """Backward-warp ``vol`` by ``flow``: output(p) = vol(p + flow(p))."""
    _check_flow_against(flow, vol.extents, "volume")
    coords = base_grid(vol.extents) + flow.data
    out, _ = _warp_forward(vol.data, coords)
    return Volume(out)


def warp_nearest(lm: LabelMap, flow: Volume) -> LabelMap:
    """Warp a label map by nearest-neighbor lookup at ``p + flow(p)``.

    Halfway coordinates round toward the floor voxel; indices are then
    clamped to the grid.
    """
    _check_flow_against(flow, lm.extents, "label map")
    coords = base_grid(lm.extents) + flow.data
    gathered = lm.labels
    idx = []
    for ax in range(3):
        n = lm.extents[ax]
        i = np.ceil(coords[ax] - 0.5).astype(np.int64)
        idx.append(np.clip(i, 0, n - 1))
    return LabelMap(gathered[idx[0], idx[1], idx[2]])


def estimate_inverse(flow: Volume) -> Volume:
    """Estimate the inverse displacement field of ``flow``.

    The negated field is backward-warped by the field itself, so the
    result at ``p`` is ``-flow(p + flow(p))`` with trilinear
    interpolation. For a perfectly invertible flow this approximates the
    true inverse; for a constant translation it is exact.
    """
    as_flow(flow)
    coords = base_grid(flow.extents) + flow.data
    out, _ = _warp_forward(-flow.data, coords)
    return Volume(out)


def map_point(flow: Volume, point) -> np.ndarray:
    """Follow ``flow`` from one continuous point: returns p + flow(p)."""
    as_flow(flow)
    pt = np.asarray(point, dtype=np.float64).reshape(3)
    return pt + trilinear_sample(flow, pt)
