"""Reverse-mode automatic differentiation on dense numpy tensors.

A :class:`Tape` records every operation in construction order, which is
already topological: each operand of a record was appended earlier.
``Tape.backward`` seeds the scalar root with 1 and walks the records in
reverse, accumulating adjoints in a fixed order, so gradients for a
given graph are bit-identical across repeated runs.

Values are float64 throughout. Nodes created from inputs that are all
constants are themselves constant and record no backward closure, which
keeps pure evaluation passes cheap.

The primitive set covers exactly what the registration networks and
losses need: elementwise arithmetic, reductions, relu/tanh, channel
concatenation, 3x3x3 convolution (stride 1 or 2, zero padding 1), 2x2x2
stride-2 deconvolution, differentiable backward warping, per-axis
forward differences, and a fused masked product sum.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import sampler


class ShapeError(ValueError):
    """Operands fed to a primitive do not fit together."""


class DiffValue:
    """One node of the computation graph: a value plus its adjoint slot."""

    __slots__ = ("value", "adjoint", "const", "_backward", "tape")

    def __init__(self, value, tape, const):
        self.value = value
        self.adjoint = None
        self.const = const
        self._backward = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of operations, independent of any other tape."""

    def __init__(self):
        self._records: list[DiffValue] = []
        self._released = False

    def __len__(self):
        return len(self._records)

    def leaf(self, value) -> DiffValue:
        """Register an input tensor whose gradient will be tracked."""
        return self._node(np.asarray(value, dtype=np.float64), const=False)

    def constant(self, value) -> DiffValue:
        """Register an input tensor treated as a constant (no gradient)."""
        return self._node(np.asarray(value, dtype=np.float64), const=True)

    def _node(self, value, const) -> DiffValue:
        if self._released:
            raise ValueError("tape was released; build a new one")
        node = DiffValue(value, self, const)
        self._records.append(node)
        return node

    def backward(self, root: DiffValue) -> None:
        """Accumulate adjoints of ``root`` into every node of this tape.

        ``root`` must be a scalar (size-1) node recorded on this tape.
        Adjoints are reset first, so calling backward twice yields the
        same result.
        """
        if self._released:
            raise ValueError("tape was released; build a new one")
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
        for node in self._records:
            node.adjoint = None
        root.adjoint = np.ones_like(root.value)
        for node in reversed(self._records):
            if node.adjoint is not None and node._backward is not None:
                node._backward(node.adjoint)

    def release(self) -> None:
        """Drop the recorded graph so it frees by reference counting.

        The record list and every backward closure tie the graph's nodes
        into reference cycles, and a finished graph then lingers until
        the cyclic collector happens to run. With hundred-megabyte
        graphs built every training iteration that lag is the difference
        between a flat memory profile and an unbounded one, so callers
        that are done differentiating should release the tape instead of
        leaning on the garbage collector. Values and adjoints already
        read from individual nodes remain valid; recording or calling
        ``backward`` afterwards raises.
        """
        for node in self._records:
            node._backward = None
        self._records.clear()
        self._released = True


def _accumulate(node: DiffValue, delta, fresh: bool = False) -> None:
    """Add ``delta`` into a node's adjoint slot.

    ``fresh`` marks deltas the caller just allocated and will never touch
    again; those may be adopted directly instead of copied. Deltas that
    alias upstream buffers (pass-through gradients, slices of them) must
    stay ``fresh=False`` so later in-place accumulation cannot corrupt
    another node's adjoint.
    """
    if node.const:
        return
    if node.adjoint is None:
        if fresh:
            node.adjoint = delta
        else:
            node.adjoint = np.array(delta, dtype=np.float64)
    else:
        node.adjoint += delta


def _result(inputs, value, backward):
    """Create the output node; constants record no backward closure."""
    tape = inputs[0].tape
    for other in inputs[1:]:
        if other.tape is not tape:
            raise ValueError("operands were recorded on different tapes")
    const = all(node.const for node in inputs)
    out = tape._node(value, const)
    if not const:
        out._backward = backward
    return out


def _require_same_shape(op, a, b):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: operand shapes {a.value.shape} and {b.value.shape} differ")


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    _require_same_shape("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result((a, b), a.value + b.value, backward)


def subtract(a: DiffValue, b: DiffValue) -> DiffValue:
    _require_same_shape("subtract", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g, fresh=True)

    return _result((a, b), a.value - b.value, backward)


def scalar_multiply(a: DiffValue, c: float) -> DiffValue:
    c = float(c)

    def backward(g):
        _accumulate(a, c * g, fresh=True)

    return _result((a,), c * a.value, backward)


def elementwise_multiply(a: DiffValue, b: DiffValue) -> DiffValue:
    _require_same_shape("elementwise_multiply", a, b)

    def backward(g):
        _accumulate(a, g * b.value, fresh=True)
        _accumulate(b, g * a.value, fresh=True)

    return _result((a, b), a.value * b.value, backward)


def square(a: DiffValue) -> DiffValue:
    def backward(g):
        _accumulate(a, 2.0 * a.value * g, fresh=True)

    return _result((a,), a.value * a.value, backward)


def sum_reduce(a: DiffValue) -> DiffValue:
    def backward(g):
        _accumulate(a, np.full(a.value.shape, float(g)), fresh=True)

    return _result((a,), np.array(a.value.sum()), backward)


def sum_of_squares(a: DiffValue) -> DiffValue:
    """Scalar sum of the squared entries, fused into one node."""
    flat = np.ascontiguousarray(a.value).ravel()

    def backward(g):
        _accumulate(a, (2.0 * float(g)) * a.value, fresh=True)

    return _result((a,), np.array(np.dot(flat, flat)), backward)


def relu(a: DiffValue) -> DiffValue:
    def backward(g):
        _accumulate(a, g * (a.value > 0.0), fresh=True)

    return _result((a,), np.maximum(a.value, 0.0), backward)


def tanh(a: DiffValue) -> DiffValue:
    out_value = np.tanh(a.value)

    def backward(g):
        _accumulate(a, g * (1.0 - out_value * out_value), fresh=True)

    return _result((a,), out_value, backward)


def concat_channels(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.value.ndim != 4 or b.value.ndim != 4 or a.value.shape[1:] != b.value.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial shapes {a.value.shape} and {b.value.shape} differ"
        )
    split = a.value.shape[0]

    def backward(g):
        _accumulate(a, g[:split])
        _accumulate(b, g[split:])

    return _result((a, b), np.concatenate([a.value, b.value], axis=0), backward)


def _conv3d_columns(x, stride):
    """Gather every 3x3x3 window of the zero-padded input into a matrix.

    The result has one column per output voxel and rows ordered as
    (channel, dx offset, dy offset, dz offset), matching a kernel
    reshaped to (c_out, c_in * 27). Building this copy once per node
    lets both the forward pass and the kernel gradient run as plain
    matrix products.
    """
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(padded, (3, 3, 3), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    ci = x.shape[0]
    out_extents = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(ci * 27, -1)
    return np.ascontiguousarray(cols), out_extents


def _conv3d_scatter_columns(dcols, ci, in_extents, out_extents, stride):
    """Adjoint of the window gather: add column gradients back per voxel.

    Each kernel offset contributes one strided slice-add into the padded
    grid; cropping the padding leaves the gradient w.r.t. the input.
    """
    ex, ey, ez = in_extents
    ox, oy, oz = out_extents
    d6 = dcols.reshape(ci, 3, 3, 3, ox, oy, oz)
    dpad = np.zeros((ci, ex + 2, ey + 2, ez + 2), dtype=np.float64)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                dpad[
                    :,
                    a : a + stride * ox : stride,
                    b : b + stride * oy : stride,
                    c : c + stride * oz : stride,
                ] += d6[:, a, b, c]
    return dpad[:, 1 : ex + 1, 1 : ey + 1, 1 : ez + 1]


def conv3d(x: DiffValue, w: DiffValue, b: DiffValue, stride: int = 1) -> DiffValue:
    """3x3x3 convolution with zero padding 1.

    ``x`` is (c_in, dx, dy, dz); ``w`` is (c_out, c_in, 3, 3, 3); ``b``
    is (c_out,). Stride 1 preserves the extents, stride 2 halves them
    with ceiling division.
    """
    if stride not in (1, 2):
        raise ValueError(f"conv3d stride must be 1 or 2, got {stride}")
    if x.value.ndim != 4:
        raise ShapeError(f"conv3d: input must be 4-D, got shape {x.value.shape}")
    if w.value.ndim != 5 or w.value.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d: kernel must be (c_out, c_in, 3, 3, 3), got {w.value.shape}")
    if w.value.shape[1] != x.value.shape[0]:
        raise ShapeError(
            f"conv3d: kernel expects {w.value.shape[1]} input channels, input has {x.value.shape[0]}"
        )
    if b.value.shape != (w.value.shape[0],):
        raise ShapeError(f"conv3d: bias shape {b.value.shape} does not match {w.value.shape[0]} filters")

    ci = x.value.shape[0]
    co = w.value.shape[0]
    in_extents = x.value.shape[1:]
    cols, out_extents = _conv3d_columns(x.value, stride)
    w2d = w.value.reshape(co, ci * 27)
    out = (w2d @ cols).reshape((co,) + out_extents)
    out += b.value[:, np.newaxis, np.newaxis, np.newaxis]

    def backward(g):
        g2d = np.ascontiguousarray(g).reshape(co, -1)
        if not w.const:
            _accumulate(w, (g2d @ cols.T).reshape(w.value.shape), fresh=True)
        if not b.const:
            _accumulate(b, g2d.sum(axis=1), fresh=True)
        if not x.const:
            dcols = w2d.T @ g2d
            dx = _conv3d_scatter_columns(dcols, ci, in_extents, out_extents, stride)
            _accumulate(x, dx, fresh=True)

    return _result((x, w, b), out, backward)


def deconv3d(x: DiffValue, w: DiffValue, b: DiffValue) -> DiffValue:
    """2x2x2 stride-2 transposed convolution; output extents are exactly 2x.

    The kernel placement is non-overlapping, so each output voxel draws
    from exactly one input voxel: out[o, 2i+a, 2j+c, 2k+e] =
    sum_i' w[o, i', a, c, e] * x[i', i, j, k] + b[o].
    """
    if x.value.ndim != 4:
        raise ShapeError(f"deconv3d: input must be 4-D, got shape {x.value.shape}")
    if w.value.ndim != 5 or w.value.shape[2:] != (2, 2, 2):
        raise ShapeError(f"deconv3d: kernel must be (c_out, c_in, 2, 2, 2), got {w.value.shape}")
    if w.value.shape[1] != x.value.shape[0]:
        raise ShapeError(
            f"deconv3d: kernel expects {w.value.shape[1]} input channels, input has {x.value.shape[0]}"
        )
    if b.value.shape != (w.value.shape[0],):
        raise ShapeError(
            f"deconv3d: bias shape {b.value.shape} does not match {w.value.shape[0]} filters"
        )

    ci, co = w.value.shape[1], w.value.shape[0]
    ex, ey, ez = x.value.shape[1:]
    x2d = np.ascontiguousarray(x.value).reshape(ci, ex * ey * ez)
    w2d = np.ascontiguousarray(w.value.transpose(0, 2, 3, 4, 1)).reshape(co * 8, ci)
    t = (w2d @ x2d).reshape(co, 2, 2, 2, ex, ey, ez)
    out = np.ascontiguousarray(t.transpose(0, 4, 1, 5, 2, 6, 3)).reshape(co, 2 * ex, 2 * ey, 2 * ez)
    out += b.value[:, np.newaxis, np.newaxis, np.newaxis]

    def backward(g):
        g7 = g.reshape(co, ex, 2, ey, 2, ez, 2)
        g2d = np.ascontiguousarray(g7.transpose(0, 2, 4, 6, 1, 3, 5)).reshape(co * 8, -1)
        if not x.const:
            _accumulate(x, (w2d.T @ g2d).reshape(ci, ex, ey, ez), fresh=True)
        if not w.const:
            dw = (g2d @ x2d.T).reshape(co, 2, 2, 2, ci).transpose(0, 4, 1, 2, 3)
            _accumulate(w, np.ascontiguousarray(dw), fresh=True)
        if not b.const:
            _accumulate(b, g.sum(axis=(1, 2, 3)), fresh=True)

    return _result((x, w, b), out, backward)


def warp(image: DiffValue, flow: DiffValue) -> DiffValue:
    """Differentiable backward warp: output(p) = image(p + flow(p)).

    Matches :func:`icreg.sampler.warp` (trilinear, border clamp) and
    propagates adjoints into both the sampled image and the flow.
    Coordinates clamped at the border contribute zero flow gradient.
    """
    if image.value.ndim != 4:
        raise ShapeError(f"warp: image must be 4-D, got shape {image.value.shape}")
    if flow.value.ndim != 4 or flow.value.shape[0] != 3:
        raise ShapeError(f"warp: flow must be (3, dx, dy, dz), got {flow.value.shape}")
    if image.value.shape[1:] != flow.value.shape[1:]:
        raise ShapeError(
            f"warp: image extents {image.value.shape[1:]} and flow extents {flow.value.shape[1:]} differ"
        )

    coords = sampler.base_grid(image.value.shape[1:]) + flow.value
    need_grads = not (image.const and flow.const)
    out, cache = sampler._warp_forward(image.value, coords, want_cache=need_grads)

    def backward(g):
        d_img, d_flow = sampler._warp_backward(
            cache, g, need_image=not image.const, need_flow=not flow.const
        )
        if d_img is not None:
            _accumulate(image, d_img, fresh=True)
        if d_flow is not None:
            _accumulate(flow, d_flow, fresh=True)

    return _result((image, flow), out, backward)


def forward_difference(a: DiffValue, axis: int) -> DiffValue:
    """Forward difference along one spatial axis of a (c, dx, dy, dz) tensor.

    The output is one voxel shorter on that axis; boundary voxels that
    lack a forward neighbor simply do not appear.
    """
    if a.value.ndim != 4:
        raise ShapeError(f"forward_difference: tensor must be 4-D, got shape {a.value.shape}")
    if axis not in (0, 1, 2):
        raise ValueError(f"forward_difference axis must be 0, 1, or 2, got {axis}")
    if a.value.shape[1 + axis] < 2:
        raise ShapeError("forward_difference: axis needs at least 2 voxels")

    ax = 1 + axis
    lead = (slice(None),) * ax
    head = lead + (slice(None, -1),)
    tail = lead + (slice(1, None),)

    def backward(g):
        d = np.zeros_like(a.value)
        d[tail] += g
        d[head] -= g
        _accumulate(a, d, fresh=True)

    return _result((a,), a.value[tail] - a.value[head], backward)


def masked_weighted_sum(mask, a: DiffValue, b: DiffValue) -> DiffValue:
    """Scalar sum of ``a * b`` over the voxels selected by a boolean mask.

    The mask is a plain array, fixed during differentiation, so the
    gradient of the selection itself is treated as zero while both
    factors receive full gradients on the selected voxels.
    """
    _require_same_shape("masked_weighted_sum", a, b)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.value.shape:
        raise ShapeError(
            f"masked_weighted_sum: mask shape {mask.shape} does not match operand shape {a.value.shape}"
        )
    av = a.value[mask]
    bv = b.value[mask]

    def backward(g):
        s = float(g)
        if not a.const:
            da = np.zeros_like(a.value)
            da[mask] = s * bv
            _accumulate(a, da, fresh=True)
        if not b.const:
            db = np.zeros_like(b.value)
            db[mask] = s * av
            _accumulate(b, db, fresh=True)

    return _result((a, b), np.array(np.dot(av, bv) if av.size else 0.0), backward)
