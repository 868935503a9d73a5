"""Dense 3D grid containers and their on-disk formats.

Grids are indexed ``(x, y, z)`` in voxel units; no physical spacing is
modeled, so every distance reported by this package is a voxel count.
Volumes carry one or more scalar channels and are immutable after
construction (the backing array is marked read-only). A displacement
field ("flow") is simply a Volume with exactly three channels holding
the x, y, z displacement components.

On-disk container (one file per volume or label map)::

    ICVOL1
    dims <dx> <dy> <dz>
    channels <c>
    dtype f32
    data
    <binary payload>

The payload holds ``c * dx * dy * dz`` little-endian values in
channel-major order with x varying fastest. Scalar images and flows use
``f32``; label maps use ``u16``. Values are promoted to float64 in
memory so that training and gradient checks run at double precision,
while files stay compact at 32 bits.

Landmark files are plain text with one ``x y z`` triple per line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ICVOL_MAGIC = "ICVOL1"

# Refuse to allocate from a hostile header before touching the payload.
_MAX_TOTAL_VALUES = 1 << 33


class VolumeError(Exception):
    """Base class for container and file-format failures."""


class FormatError(VolumeError):
    """Header or payload content does not follow the declared format."""


class DimensionError(VolumeError):
    """Grid dimensions are missing, too small, or absurdly large."""


class TruncatedError(VolumeError):
    """Payload ends before the header-declared value count."""


@dataclass(frozen=True)
class GridShape:
    """Extents of a 3D voxel grid. Every axis must span at least 2 voxels."""

    dx: int
    dy: int
    dz: int

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise DimensionError(f"{name} must be an integer, got {v!r}")
            if v < 2:
                raise DimensionError(f"{name} must be >= 2, got {v}")
        if self.num_voxels > _MAX_TOTAL_VALUES:
            raise DimensionError(f"grid of {self.num_voxels} voxels is over the size limit")

    @property
    def extents(self) -> tuple[int, int, int]:
        return (int(self.dx), int(self.dy), int(self.dz))

    @property
    def num_voxels(self) -> int:
        return int(self.dx) * int(self.dy) * int(self.dz)


class Volume:
    """Immutable multi-channel scalar field on a 3D grid.

    ``data`` has shape ``(channels, dx, dy, dz)`` and dtype float64. A
    plain 3-D array is accepted and treated as a single channel. All
    values must be finite.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[np.newaxis]
        if arr.ndim != 4:
            raise ValueError(f"volume data must be 3-D or 4-D, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("volume needs at least one channel")
        GridShape(*arr.shape[1:])
        if not np.isfinite(arr).all():
            raise ValueError("volume values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Volume is immutable")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.data.shape[1:])

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    def channel(self, i: int) -> np.ndarray:
        return self.data[i]

    def __repr__(self):
        c, dx, dy, dz = self.data.shape
        return f"Volume(channels={c}, extents=({dx}, {dy}, {dz}))"


class LabelMap:
    """Immutable integer segmentation on a 3D grid, 0 meaning background.

    Labels are stored as uint16; inputs must already be non-negative
    integers no larger than 65535.
    """

    __slots__ = ("labels",)

    def __init__(self, labels):
        arr = np.asarray(labels)
        if arr.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ValueError("labels must fit in uint16")
        GridShape(*arr.shape)
        arr = arr.astype(np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    def __setattr__(self, name, value):
        raise AttributeError("LabelMap is immutable")

    @property
    def grid(self) -> GridShape:
        return GridShape(*self.labels.shape)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape

    def __repr__(self):
        return f"LabelMap(extents={self.labels.shape})"


def as_flow(vol: Volume) -> Volume:
    """Validate that ``vol`` is a displacement field (exactly 3 channels)."""
    if not isinstance(vol, Volume):
        raise TypeError(f"expected a Volume, got {type(vol).__name__}")
    if vol.channels != 3:
        raise ValueError(f"a flow needs exactly 3 channels, got {vol.channels}")
    return vol


def _read_line(f, what: str) -> str:
    raw = f.readline(256)
    if not raw.endswith(b"\n"):
        raise FormatError(f"missing or unterminated {what} line")
    try:
        return raw[:-1].decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"non-ascii bytes in {what} line") from exc


def _parse_count(token: str, what: str) -> int:
    if not token.isdigit():
        raise FormatError(f"{what} must be a non-negative integer, got {token!r}")
    return int(token)


def _read_header(f):
    if _read_line(f, "magic") != ICVOL_MAGIC:
        raise FormatError("bad magic, not an ICVOL file")
    dims_line = _read_line(f, "dims").split()
    if len(dims_line) != 4 or dims_line[0] != "dims":
        raise FormatError("expected 'dims <dx> <dy> <dz>'")
    dims = [_parse_count(t, "dims") for t in dims_line[1:]]
    chan_line = _read_line(f, "channels").split()
    if len(chan_line) != 2 or chan_line[0] != "channels":
        raise FormatError("expected 'channels <c>'")
    channels = _parse_count(chan_line[1], "channels")
    dtype_line = _read_line(f, "dtype").split()
    if len(dtype_line) != 2 or dtype_line[0] != "dtype":
        raise FormatError("expected 'dtype f32' or 'dtype u16'")
    dtype = dtype_line[1]
    if dtype not in ("f32", "u16"):
        raise FormatError(f"unsupported dtype {dtype!r}")
    if _read_line(f, "data marker") != "data":
        raise FormatError("expected 'data' marker before payload")
    if channels < 1:
        raise DimensionError("channels must be >= 1")
    for d in dims:
        if d < 2:
            raise DimensionError(f"every axis needs >= 2 voxels, got dims {tuple(dims)}")
    total = channels * dims[0] * dims[1] * dims[2]
    if total > _MAX_TOTAL_VALUES:
        raise DimensionError(f"header declares {total} values, over the size limit")
    return tuple(dims), channels, dtype


def _read_payload(f, dims, channels, np_dtype):
    dx, dy, dz = dims
    total = channels * dx * dy * dz
    itemsize = np.dtype(np_dtype).itemsize
    buf = f.read(total * itemsize)
    if len(buf) < total * itemsize:
        raise TruncatedError(f"payload holds {len(buf)} bytes, header promised {total * itemsize}")
    if f.read(1):
        raise FormatError("trailing bytes after payload")
    flat = np.frombuffer(buf, dtype=np_dtype, count=total)
    # Disk order is channel-major with x fastest, so the natural C-order
    # axes are (c, z, y, x); transpose back to (c, x, y, z).
    return flat.reshape(channels, dz, dy, dx).transpose(0, 3, 2, 1)


def load_volume(path) -> Volume:
    """Read a float volume (scalar image or flow) from an ICVOL file."""
    with open(path, "rb") as f:
        dims, channels, dtype = _read_header(f)
        if dtype != "f32":
            raise FormatError(f"expected dtype f32 for a volume, file has {dtype}")
        arr = _read_payload(f, dims, channels, "<f4").astype(np.float64)
    if not np.isfinite(arr).all():
        raise FormatError("payload holds non-finite values")
    return Volume(arr)


def save_volume(vol: Volume, path) -> None:
    """Write a Volume as an ICVOL file with a 32-bit payload."""
    c, dx, dy, dz = vol.data.shape
    header = f"{ICVOL_MAGIC}\ndims {dx} {dy} {dz}\nchannels {c}\ndtype f32\ndata\n"
    payload = np.ascontiguousarray(vol.data.transpose(0, 3, 2, 1)).astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def load_labelmap(path) -> LabelMap:
    """Read a label map from an ICVOL file with a u16 payload."""
    with open(path, "rb") as f:
        dims, channels, dtype = _read_header(f)
        if dtype != "u16":
            raise FormatError(f"expected dtype u16 for a label map, file has {dtype}")
        if channels != 1:
            raise FormatError("label maps are single channel")
        arr = _read_payload(f, dims, channels, "<u2")[0]
    return LabelMap(arr)


def save_labelmap(lm: LabelMap, path) -> None:
    dx, dy, dz = lm.labels.shape
    header = f"{ICVOL_MAGIC}\ndims {dx} {dy} {dz}\nchannels 1\ndtype u16\ndata\n"
    payload = np.ascontiguousarray(lm.labels.transpose(2, 1, 0)).astype("<u2").tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(payload)


def load_landmarks(path) -> np.ndarray:
    """Read landmarks as an (k, 3) float array from 'x y z' text lines."""
    points = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates, got {len(parts)}")
            try:
                triple = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: bad coordinate in {stripped!r}") from exc
            if not all(math.isfinite(v) for v in triple):
                raise FormatError(f"{path}:{lineno}: non-finite coordinate")
            points.append(triple)
    return np.array(points, dtype=np.float64).reshape(len(points), 3)


def save_landmarks(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as f:
        for x, y, z in pts:
            f.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def zscore_normalize(vol: Volume) -> Volume:
    """Shift and scale a single-channel volume to mean 0, population std 1.

    A constant volume maps to all zeros rather than dividing by zero.
    """
    if vol.channels != 1:
        raise ValueError(f"z-score normalization expects a single channel, got {vol.channels}")
    data = vol.data[0]
    std = data.std()
    if std == 0.0:
        return Volume(np.zeros_like(data))
    return Volume((data - data.mean()) / std)


_AXIS_NAMES = {"x": 0, "y": 1, "z": 2}


def export_slice(vol: Volume, axis, index: int, path) -> None:
    """Write one axis-aligned slice as a portable gray/pix map.

    Single-channel volumes become binary PGM images scaled channel-wise
    from [min, max] to [0, 255]. Three-channel flows become binary PPM
    images; each flow channel is scaled symmetrically around zero so a
    zero displacement always lands on mid-gray. The scaling bounds are
    recorded as one text line in a ``<path>.bounds.txt`` sidecar so the
    image can be inverted later. Degenerate (constant) channels map to
    a uniform 128.

    The slice keeps the two remaining axes in (x, y, z) order: the first
    one runs along image columns, the second along image rows.
    """
    if isinstance(axis, str):
        if axis not in _AXIS_NAMES:
            raise ValueError(f"axis must be one of x, y, z, got {axis!r}")
        axis = _AXIS_NAMES[axis]
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1, or 2, got {axis!r}")
    extent = vol.data.shape[1 + axis]
    if not isinstance(index, (int, np.integer)) or isinstance(index, bool):
        raise ValueError(f"slice index must be an integer, got {index!r}")
    if index < 0 or index >= extent:
        raise IndexError(f"slice index {index} out of range for axis extent {extent}")
    if vol.channels not in (1, 3):
        raise ValueError(f"only scalar or 3-channel volumes can be exported, got {vol.channels}")

    plane = np.take(vol.data, index, axis=1 + axis)
    # Remaining axes (a1 < a2): a1 -> columns, a2 -> rows.
    plane = plane.transpose(0, 2, 1)

    bounds = []
    bands = []
    for ch in range(vol.channels):
        band = plane[ch]
        if vol.channels == 3:
            m = float(np.max(np.abs(band)))
            lo, hi = -m, m
        else:
            lo, hi = float(band.min()), float(band.max())
        bounds.append((lo, hi))
        if hi == lo:
            scaled = np.full(band.shape, 128, dtype=np.uint8)
        else:
            scaled = np.rint((band - lo) / (hi - lo) * 255.0).astype(np.uint8)
        bands.append(scaled)

    height, width = bands[0].shape
    with open(path, "wb") as f:
        if vol.channels == 1:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(bands[0].tobytes())
        else:
            f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
            f.write(np.stack(bands, axis=-1).tobytes())
    sidecar = " ".join(f"{lo:.9g} {hi:.9g}" for lo, hi in bounds)
    with open(f"{path}.bounds.txt", "w", encoding="ascii") as f:
        f.write(sidecar + "\n")
