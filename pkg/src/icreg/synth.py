"""Synthetic volumes, smooth fold-free flows, and ground-truth pairs.

Volumes are sums of Gaussian blobs with random centers, widths, and
amplitudes, z-score normalized. The matching label map assigns each
voxel the index of its strongest blob, or background when that blob's
contribution falls below one tenth of the blob peak. The blob centers
double as landmarks.

Flows superpose a few random Gaussian-enveloped displacement bumps and
are then rescaled so that both constraints hold at once: the largest
displacement magnitude stays within ``max_disp`` and every forward
difference of component i along axis i stays strictly above -0.5, which
keeps the field comfortably away from folding. Both constraints scale
linearly, so a single scale factor always satisfies them.

A pair sample applies such a flow to a blob volume: the second volume
is exactly ``warp(a, flow)``, labels follow by nearest-neighbor
warping, and landmark positions in the second volume solve the implicit
equation ``x + flow(x) = landmark_a`` by fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sampler import base_grid, trilinear_sample, warp, warp_nearest
from .volume import (
    FormatError,
    GridShape,
    LabelMap,
    Volume,
    load_labelmap,
    load_landmarks,
    load_volume,
    save_labelmap,
    save_landmarks,
    save_volume,
    zscore_normalize,
)

DATASET_MAGIC = "ICSYNTH1"

# Strict upper bound used for the anti-folding rescale; forward
# differences are pushed below this margin, not merely below 0.5.
_FOLD_MARGIN = 0.49


class NonConvergentError(Exception):
    """Fixed-point landmark inversion failed to reach tolerance."""


def _as_extents(shape) -> tuple[int, int, int]:
    if isinstance(shape, GridShape):
        return shape.extents
    ext = tuple(int(e) for e in shape)
    GridShape(*ext)
    return ext


def make_blob_volume(seed: int, shape, num_blobs: int = 5):
    """Random blob volume; returns (volume, labels, landmarks).

    Deterministic for a given seed. Landmarks are the blob centers in
    voxel coordinates; label ``k + 1`` marks blob k's territory.
    """
    if num_blobs < 1:
        raise ValueError(f"num_blobs must be >= 1, got {num_blobs}")
    extents = _as_extents(shape)
    rng = np.random.default_rng(seed)
    ext = np.array(extents, dtype=np.float64)
    centers = rng.uniform(0.15, 0.85, size=(num_blobs, 3)) * (ext - 1.0)
    min_ext = float(min(extents))
    sigmas = rng.uniform(min_ext / 10.0, min_ext / 5.0, size=num_blobs)
    amps = rng.uniform(0.6, 1.0, size=num_blobs)

    grid = base_grid(extents)
    fields = np.empty((num_blobs,) + extents, dtype=np.float64)
    for k in range(num_blobs):
        d2 = ((grid - centers[k].reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        fields[k] = amps[k] * np.exp(-d2 / (2.0 * sigmas[k] ** 2))

    volume = zscore_normalize(Volume(fields.sum(axis=0)))
    strongest = fields.argmax(axis=0)
    peak = np.take_along_axis(fields, strongest[np.newaxis], axis=0)[0]
    labels = np.where(peak >= 0.1 * amps[strongest], strongest + 1, 0)
    return volume, LabelMap(labels.astype(np.int64)), centers


def _min_diagonal_difference(flow: np.ndarray) -> float:
    worst = np.inf
    for axis in range(3):
        g = np.diff(flow[axis], axis=axis)
        if g.size:
            worst = min(worst, float(g.min()))
    return worst


def make_smooth_flow(seed: int, shape, max_disp: float, num_bumps: int = 4) -> Volume:
    """Random smooth displacement field with no folds.

    Postconditions: every component magnitude is at most ``max_disp``
    and every diagonal forward difference exceeds -0.5. ``max_disp`` of
    zero yields the zero flow.
    """
    extents = _as_extents(shape)
    max_disp = float(max_disp)
    if max_disp < 0.0 or not np.isfinite(max_disp):
        raise ValueError(f"max_disp must be finite and >= 0, got {max_disp!r}")
    if max_disp >= 0.4 * min(extents):
        raise ValueError(
            f"max_disp {max_disp} too large for extents {extents}; needs to stay under 40% of the smallest axis"
        )
    rng = np.random.default_rng(seed)
    ext = np.array(extents, dtype=np.float64)
    grid = base_grid(extents)
    flow = np.zeros((3,) + extents, dtype=np.float64)
    min_ext = float(min(extents))
    for _ in range(num_bumps):
        center = rng.uniform(0.1, 0.9, size=3) * (ext - 1.0)
        sigma = rng.uniform(min_ext / 6.0, min_ext / 3.0)
        direction = rng.normal(size=3)
        d2 = ((grid - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        envelope = np.exp(-d2 / (2.0 * sigma**2))
        flow += direction.reshape(3, 1, 1, 1) * envelope

    peak = float(np.abs(flow).max())
    if peak == 0.0 or max_disp == 0.0:
        return Volume(np.zeros_like(flow))
    scale = max_disp / peak
    worst = _min_diagonal_difference(flow)
    if worst < 0.0:
        scale = min(scale, _FOLD_MARGIN / (-worst))
    flow *= scale
    # peak * (max_disp / peak) can round one ulp above the cap; clamp it back
    # so the advertised bound holds exactly.
    np.clip(flow, -max_disp, max_disp, out=flow)

    if float(np.abs(flow).max()) > max_disp or _min_diagonal_difference(flow) <= -0.5:
        raise NonConvergentError("could not rescale the flow into a fold-free field")
    return Volume(flow)


def invert_flow_at_points(flow: Volume, targets, tol: float = 1e-3, max_iter: int = 200) -> np.ndarray:
    """Solve ``x + flow(x) = target`` per point by fixed-point iteration."""
    pts = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(pts)
    for idx, target in enumerate(pts):
        x = target.copy()
        for _ in range(max_iter):
            nxt = target - trilinear_sample(flow, x)
            if float(np.abs(nxt - x).max()) < tol:
                x = nxt
                break
            x = nxt
        else:
            raise NonConvergentError(
                f"landmark inversion did not converge to {tol} within {max_iter} iterations"
            )
        out[idx] = x
    return out


@dataclass(frozen=True)
class PairSample:
    """One synthetic registration pair with full ground truth."""

    vol_a: Volume
    vol_b: Volume
    flow_ab: Volume
    labels_a: LabelMap
    labels_b: LabelMap
    landmarks_a: np.ndarray
    landmarks_b: np.ndarray


def make_pair(seed, shape, max_disp: float, num_blobs: int = 5) -> PairSample:
    """Generate a blob volume, deform it, and carry all annotations along.

    ``vol_b`` is exactly ``warp(vol_a, flow_ab)``, so ``flow_ab`` is the
    ground-truth flow in the A-toward-B direction.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    blob_seq, flow_seq = seq.spawn(2)
    vol_a, labels_a, landmarks_a = make_blob_volume(blob_seq, shape, num_blobs)
    flow_ab = make_smooth_flow(flow_seq, shape, max_disp)
    vol_b = warp(vol_a, flow_ab)
    labels_b = warp_nearest(labels_a, flow_ab)
    landmarks_b = invert_flow_at_points(flow_ab, landmarks_a)
    return PairSample(vol_a, vol_b, flow_ab, labels_a, labels_b, landmarks_a, landmarks_b)


_PAIR_FILES = (
    "a.icvol",
    "b.icvol",
    "flow_ab.icvol",
    "labels_a.icvol",
    "labels_b.icvol",
    "landmarks_a.txt",
    "landmarks_b.txt",
)


def write_dataset(dirpath, seed: int, shape, num_pairs: int, max_disp: float, num_blobs: int = 5) -> list[Path]:
    """Emit ``num_pairs`` pair samples plus a manifest into a directory."""
    if num_pairs < 1:
        raise ValueError(f"num_pairs must be >= 1, got {num_pairs}")
    extents = _as_extents(shape)
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    pair_seqs = np.random.SeedSequence(seed).spawn(num_pairs)
    pair_dirs = []
    for k in range(num_pairs):
        sample = make_pair(pair_seqs[k], extents, max_disp, num_blobs)
        pdir = dirpath / f"pair{k:03d}"
        pdir.mkdir(exist_ok=True)
        save_volume(sample.vol_a, pdir / "a.icvol")
        save_volume(sample.vol_b, pdir / "b.icvol")
        save_volume(sample.flow_ab, pdir / "flow_ab.icvol")
        save_labelmap(sample.labels_a, pdir / "labels_a.icvol")
        save_labelmap(sample.labels_b, pdir / "labels_b.icvol")
        save_landmarks(sample.landmarks_a, pdir / "landmarks_a.txt")
        save_landmarks(sample.landmarks_b, pdir / "landmarks_b.txt")
        pair_dirs.append(pdir)
    lines = [
        DATASET_MAGIC,
        f"seed {int(seed)}",
        f"shape {extents[0]} {extents[1]} {extents[2]}",
        f"pairs {num_pairs}",
        f"max_disp {float(max_disp)!r}",
        f"num_blobs {int(num_blobs)}",
    ]
    lines += [f"pair {p.name}" for p in pair_dirs]
    with open(dirpath / "manifest.txt", "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return pair_dirs


@dataclass(frozen=True)
class DatasetInfo:
    root: Path
    pair_dirs: tuple[Path, ...]
    meta: dict


def load_dataset(dirpath) -> DatasetInfo:
    root = Path(dirpath)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"{root}: no manifest.txt, not a dataset directory")
    with open(manifest, "r", encoding="ascii") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != DATASET_MAGIC:
        raise FormatError(f"{manifest}: bad dataset magic")
    meta: dict = {}
    pair_dirs = []
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key == "pair":
            pdir = root / rest
            for fname in _PAIR_FILES:
                if not (pdir / fname).is_file():
                    raise FormatError(f"{pdir}: missing {fname}")
            pair_dirs.append(pdir)
        else:
            meta[key] = rest
    if not pair_dirs:
        raise FormatError(f"{manifest}: dataset lists no pairs")
    return DatasetInfo(root=root, pair_dirs=tuple(pair_dirs), meta=meta)


def load_pair(pdir) -> PairSample:
    pdir = Path(pdir)
    return PairSample(
        vol_a=load_volume(pdir / "a.icvol"),
        vol_b=load_volume(pdir / "b.icvol"),
        flow_ab=load_volume(pdir / "flow_ab.icvol"),
        labels_a=load_labelmap(pdir / "labels_a.icvol"),
        labels_b=load_labelmap(pdir / "labels_b.icvol"),
        landmarks_a=load_landmarks(pdir / "landmarks_a.txt"),
        landmarks_b=load_landmarks(pdir / "landmarks_b.txt"),
    )


def training_volumes(info: DatasetInfo, holdout: int = 0) -> list[Volume]:
    """Collect the A and B volumes of every non-held-out pair.

    The last ``holdout`` pairs are excluded so they can serve as unseen
    evaluation pairs.
    """
    if holdout < 0 or holdout >= len(info.pair_dirs):
        raise ValueError(
            f"holdout must be in [0, {len(info.pair_dirs) - 1}], got {holdout}"
        )
    use = info.pair_dirs[: len(info.pair_dirs) - holdout]
    volumes: list[Volume] = []
    for pdir in use:
        volumes.append(load_volume(pdir / "a.icvol"))
        volumes.append(load_volume(pdir / "b.icvol"))
    return volumes
