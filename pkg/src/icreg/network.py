"""Fully convolutional flow predictor and its parameter checkpoints.

The network maps a pair of single-channel volumes, concatenated as two
input channels (first A, then B), to a 3-channel displacement field on
the same grid. Architecture, for ``depth`` resolution levels and base
width ``start_channels``:

* contracting level d: one 3x3x3 stride-1 convolution at width
  ``start_channels * 2**d``, then one 3x3x3 stride-2 convolution that
  halves the extents and doubles the width;
* expanding level d (deepest first): one 2x2x2 stride-2 deconvolution
  back to width ``start_channels * 2**d``, concatenation with the
  stride-1 feature map of the same resolution, then one 3x3x3 stride-1
  convolution back to that width;
* head: one 3x3x3 convolution to 3 channels, tanh, then multiplication
  by ``max_disp``, which caps every displacement component.

Every convolution and deconvolution except the head is followed by a
ReLU. Kernels initialize uniformly in +-sqrt(6 / fan_in), where fan_in
counts the inputs feeding one output element; biases start at zero.
Both registration directions reuse one parameter set: the forward pass
is simply run twice with the input volumes swapped.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue, Tape
from .volume import FormatError, Volume

CHECKPOINT_MAGIC = "ICCKPT1"
TENSOR_MAGIC = "ICTEN1"


@dataclass(frozen=True)
class FcnConfig:
    """Shape of the flow predictor.

    start_channels: filter count of the first convolution.
    depth: number of downsampling levels; input extents must be
        divisible by ``2 ** depth``.
    max_disp: displacement cap in voxels applied by the tanh head.
    """

    start_channels: int = 8
    depth: int = 2
    max_disp: float = 7.0

    def __post_init__(self):
        if not isinstance(self.start_channels, int) or self.start_channels < 1:
            raise ValueError(f"start_channels must be a positive integer, got {self.start_channels!r}")
        if not isinstance(self.depth, int) or self.depth < 1:
            raise ValueError(f"depth must be a positive integer, got {self.depth!r}")
        if not (float(self.max_disp) > 0.0):
            raise ValueError(f"max_disp must be positive, got {self.max_disp!r}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv1", "conv2", "deconv", "head"
    c_in: int
    c_out: int

    @property
    def kernel_shape(self) -> tuple[int, ...]:
        k = 2 if self.kind == "deconv" else 3
        return (self.c_out, self.c_in, k, k, k)

    @property
    def fan_in(self) -> int:
        # Inputs feeding one output element: full 27-voxel support for the
        # 3x3x3 convolutions, one voxel per channel for the
        # non-overlapping 2x2x2 stride-2 deconvolution.
        if self.kind == "deconv":
            return self.c_in
        return self.c_in * 27


def layer_specs(config: FcnConfig) -> list[LayerSpec]:
    """Ordered layer list; the single source of truth for shapes."""
    n = config.start_channels
    specs = []
    c_prev = 2
    for d in range(config.depth):
        width = n * (2**d)
        specs.append(LayerSpec(f"enc{d}_conv", "conv1", c_prev, width))
        specs.append(LayerSpec(f"enc{d}_down", "conv2", width, width * 2))
        c_prev = width * 2
    for d in reversed(range(config.depth)):
        width = n * (2**d)
        specs.append(LayerSpec(f"dec{d}_up", "deconv", c_prev, width))
        specs.append(LayerSpec(f"dec{d}_conv", "conv1", width * 2, width))
        c_prev = width
    specs.append(LayerSpec("head", "head", c_prev, 3))
    return specs


def init_params(config: FcnConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministically initialize all kernels and biases for ``config``.

    Hidden kernels draw from a fan-in scaled uniform range. The flow
    head starts at zero so a fresh network predicts the identity
    transform: training then grows displacements from zero instead of
    spending its budget unwinding a random, heavily folded start.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in layer_specs(config):
        bound = np.sqrt(6.0 / spec.fan_in)
        params[f"{spec.name}.w"] = rng.uniform(-bound, bound, size=spec.kernel_shape)
        params[f"{spec.name}.b"] = np.zeros(spec.c_out, dtype=np.float64)
    params["head.w"] = np.zeros_like(params["head.w"])
    return params


def validate_params(config: FcnConfig, params: dict[str, np.ndarray]) -> None:
    expected = {}
    for spec in layer_specs(config):
        expected[f"{spec.name}.w"] = spec.kernel_shape
        expected[f"{spec.name}.b"] = (spec.c_out,)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def check_pair(config: FcnConfig, a: Volume, b: Volume) -> None:
    """Validate a registration pair against the network's requirements."""
    for label, vol in (("first", a), ("second", b)):
        if vol.channels != 1:
            raise ValueError(f"{label} volume must be single channel, got {vol.channels}")
    if tuple(a.extents) != tuple(b.extents):
        raise ValueError(f"volume extents differ: {tuple(a.extents)} vs {tuple(b.extents)}")
    div = 2**config.depth
    for e in a.extents:
        if e % div != 0:
            raise ValueError(
                f"extents {tuple(a.extents)} must be divisible by {div} for depth {config.depth}"
            )


def build_forward(
    param_nodes: dict[str, DiffValue],
    config: FcnConfig,
    img_a: DiffValue,
    img_b: DiffValue,
) -> DiffValue:
    """Differentiable forward pass producing a (3, dx, dy, dz) flow node."""
    x = ad.concat_channels(img_a, img_b)
    skips = []
    for d in range(config.depth):
        x = ad.relu(ad.conv3d(x, param_nodes[f"enc{d}_conv.w"], param_nodes[f"enc{d}_conv.b"], 1))
        skips.append(x)
        x = ad.relu(ad.conv3d(x, param_nodes[f"enc{d}_down.w"], param_nodes[f"enc{d}_down.b"], 2))
    for d in reversed(range(config.depth)):
        x = ad.relu(ad.deconv3d(x, param_nodes[f"dec{d}_up.w"], param_nodes[f"dec{d}_up.b"]))
        x = ad.concat_channels(x, skips[d])
        x = ad.relu(ad.conv3d(x, param_nodes[f"dec{d}_conv.w"], param_nodes[f"dec{d}_conv.b"], 1))
    x = ad.conv3d(x, param_nodes["head.w"], param_nodes["head.b"], 1)
    return ad.scalar_multiply(ad.tanh(x), config.max_disp)


def build_bidirectional(
    param_nodes: dict[str, DiffValue],
    config: FcnConfig,
    img_a: DiffValue,
    img_b: DiffValue,
) -> tuple[DiffValue, DiffValue]:
    """Run the shared-parameter network in both directions.

    Returns ``(flow_ab, flow_ba)`` where ``warp(a, flow_ab)`` should
    approximate ``b`` and vice versa. Because both passes share the
    same parameter nodes, adjoints from both directions accumulate into
    one gradient per parameter.
    """
    flow_ab = build_forward(param_nodes, config, img_a, img_b)
    flow_ba = build_forward(param_nodes, config, img_b, img_a)
    return flow_ab, flow_ba


def param_leaves(tape: Tape, params: dict[str, np.ndarray], trainable: bool = True):
    make = tape.leaf if trainable else tape.constant
    return {name: make(value) for name, value in params.items()}


def predict_flow(params: dict[str, np.ndarray], config: FcnConfig, a: Volume, b: Volume) -> Volume:
    """Non-differentiable convenience wrapper around one forward pass."""
    check_pair(config, a, b)
    validate_params(config, params)
    tape = Tape()
    nodes = param_leaves(tape, params, trainable=False)
    flow = build_forward(nodes, config, tape.constant(a.data), tape.constant(b.data))
    out = Volume(flow.value)
    tape.release()
    return out


def predict_bidirectional(
    params: dict[str, np.ndarray], config: FcnConfig, a: Volume, b: Volume
) -> tuple[Volume, Volume]:
    """Predict both directed flows for a pair as Volumes."""
    check_pair(config, a, b)
    validate_params(config, params)
    tape = Tape()
    nodes = param_leaves(tape, params, trainable=False)
    fab, fba = build_bidirectional(nodes, config, tape.constant(a.data), tape.constant(b.data))
    out = Volume(fab.value), Volume(fba.value)
    tape.release()
    return out


def _save_tensor(path: Path, arr: np.ndarray) -> None:
    shape = " ".join(str(int(d)) for d in arr.shape)
    with open(path, "wb") as f:
        f.write(f"{TENSOR_MAGIC}\nshape {shape}\ndtype f32\ndata\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def _load_tensor(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        def line(what):
            raw = f.readline(256)
            if not raw.endswith(b"\n"):
                raise FormatError(f"{path}: missing {what} line")
            return raw[:-1].decode("ascii")

        if line("magic") != TENSOR_MAGIC:
            raise FormatError(f"{path}: bad tensor magic")
        shape_line = line("shape").split()
        if len(shape_line) < 2 or shape_line[0] != "shape":
            raise FormatError(f"{path}: expected 'shape <d0> <d1> ...'")
        try:
            shape = tuple(int(t) for t in shape_line[1:])
        except ValueError as exc:
            raise FormatError(f"{path}: bad shape entry") from exc
        if any(d < 1 for d in shape):
            raise FormatError(f"{path}: non-positive tensor dimension")
        if line("dtype") != "dtype f32":
            raise FormatError(f"{path}: expected 'dtype f32'")
        if line("data marker") != "data":
            raise FormatError(f"{path}: expected 'data' marker")
        total = int(np.prod(shape))
        buf = f.read(total * 4)
        if len(buf) < total * 4:
            raise FormatError(f"{path}: truncated tensor payload")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return np.frombuffer(buf, dtype="<f4", count=total).reshape(shape).astype(np.float64)


def save_checkpoint(dirpath, params: dict[str, np.ndarray], config: FcnConfig) -> None:
    """Write parameters to a checkpoint directory.

    The directory holds a ``manifest.txt`` (format version, network
    config, and the named tensor shapes in order) plus one binary tensor
    container per parameter with a 32-bit payload.
    """
    validate_params(config, params)
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = [
        CHECKPOINT_MAGIC,
        f"start_channels {config.start_channels}",
        f"depth {config.depth}",
        f"max_disp {config.max_disp!r}",
    ]
    for spec in layer_specs(config):
        for name in (f"{spec.name}.w", f"{spec.name}.b"):
            arr = params[name]
            shape = " ".join(str(int(d)) for d in arr.shape)
            lines.append(f"tensor {name} {shape}")
            _save_tensor(dirpath / f"{name}.icten", arr)
    with open(dirpath / "manifest.txt", "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(dirpath) -> tuple[dict[str, np.ndarray], FcnConfig]:
    """Read a checkpoint directory back into parameters and a config."""
    dirpath = Path(dirpath)
    manifest = dirpath / "manifest.txt"
    if not manifest.is_file():
        raise FormatError(f"{dirpath}: no manifest.txt, not a checkpoint directory")
    with open(manifest, "r", encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{manifest}: bad checkpoint magic")
    fields: dict[str, str] = {}
    tensor_lines = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "tensor":
            tensor_lines.append(parts[1:])
        elif len(parts) == 2:
            fields[parts[0]] = parts[1]
        else:
            raise FormatError(f"{manifest}: unrecognized line {ln!r}")
    try:
        config = FcnConfig(
            start_channels=int(fields["start_channels"]),
            depth=int(fields["depth"]),
            max_disp=float(fields["max_disp"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{manifest}: bad or missing config fields") from exc

    params: dict[str, np.ndarray] = {}
    for entry in tensor_lines:
        if len(entry) < 2:
            raise FormatError(f"{manifest}: malformed tensor line")
        name = entry[0]
        try:
            shape = tuple(int(t) for t in entry[1:])
        except ValueError as exc:
            raise FormatError(f"{manifest}: bad tensor shape for {name}") from exc
        arr = _load_tensor(dirpath / f"{name}.icten")
        if tuple(arr.shape) != shape:
            raise FormatError(f"{dirpath}: tensor {name} shape {arr.shape} disagrees with manifest {shape}")
        params[name] = arr
    try:
        validate_params(config, params)
    except ValueError as exc:
        raise FormatError(f"{dirpath}: checkpoint does not match its declared config: {exc}") from exc
    return params, config
