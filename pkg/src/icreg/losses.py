"""Training objective for symmetric, invertible, fold-free registration.

Four terms, each a sum over voxels (an explicit per-voxel mean mode is
available but never the default):

* similarity: squared intensity error of both warped directions,
  ``|b - warp(a, flow_ab)|^2 + |a - warp(b, flow_ba)|^2``;
* smoothness: squared forward differences of every flow component along
  every axis, for both flows; a voxel without a forward neighbor on an
  axis contributes nothing along that axis;
* inverse consistency: squared disagreement between each flow and the
  estimated inverse of the opposite flow, where the inverse estimate of
  a field F is the negated field backward-warped by F itself;
* anti-folding: for each flow, axis i, and voxel with a forward
  neighbor, let g be the forward difference of component i along axis
  i; whenever ``g + 1 <= 0`` (a fold) the term adds ``|g + 1| * g^2``.
  Both the ``|g + 1|`` factor and ``g^2`` carry gradients, while the
  fold indicator itself is treated as locally constant.

The total is ``sim + alpha * smo + beta * inv + gamma * ant``.

A fold at (voxel, axis) means exactly ``g + 1 <= 0``; `folding_count`
reports how many such pairs a flow contains, which is the discrete
criterion for a non-diffeomorphic displacement on the voxel grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import sampler
from .autodiff import DiffValue
from .volume import Volume


@dataclass(frozen=True)
class LossWeights:
    """Weights of the regularization terms (all finite and >= 0).

    alpha scales smoothness, beta scales inverse consistency, gamma
    scales the anti-folding penalty.
    """

    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1e5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")


@dataclass(frozen=True)
class LossReport:
    """Scalar summary of one loss evaluation."""

    sim: float
    smo: float
    inv: float
    ant: float
    total: float
    folding_count: int

    def csv_row(self, iteration: int) -> str:
        cells = [str(int(iteration))]
        cells += [repr(float(v)) for v in (self.sim, self.smo, self.inv, self.ant, self.total)]
        cells.append(str(int(self.folding_count)))
        return ",".join(cells)

    @staticmethod
    def csv_header() -> str:
        return "iteration,sim,smo,inv,ant,total,folding_count"


def _image_node(img, tape) -> DiffValue:
    if isinstance(img, DiffValue):
        return img
    if isinstance(img, Volume):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[np.newaxis]
    return tape.constant(arr)


def _check_reduction(reduction: str) -> None:
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def _reduce(node: DiffValue, reduction: str, extents) -> DiffValue:
    if reduction == "mean":
        nvox = int(extents[0]) * int(extents[1]) * int(extents[2])
        return ad.scalar_multiply(node, 1.0 / nvox)
    return node


def _sum_squares(node: DiffValue) -> DiffValue:
    return ad.sum_of_squares(node)


def loss_sim(img_a, img_b, flow_ab: DiffValue, flow_ba: DiffValue, reduction: str = "sum") -> DiffValue:
    """Symmetric squared-intensity similarity of both warped directions."""
    _check_reduction(reduction)
    tape = flow_ab.tape
    a = _image_node(img_a, tape)
    b = _image_node(img_b, tape)
    warped_a = ad.warp(a, flow_ab)
    warped_b = ad.warp(b, flow_ba)
    total = ad.add(_sum_squares(ad.subtract(b, warped_a)), _sum_squares(ad.subtract(a, warped_b)))
    return _reduce(total, reduction, flow_ab.value.shape[1:])


def _flow_differences(flow_ab: DiffValue, flow_ba: DiffValue) -> list[tuple[DiffValue, int]]:
    """Forward-difference nodes of both flows, tagged with their axis.

    Smoothness and anti-folding both consume these, so building them once
    per graph lets the two terms share nodes.
    """
    return [(ad.forward_difference(flow, axis), axis) for flow in (flow_ab, flow_ba) for axis in range(3)]


def _smoothness_of(diffs) -> DiffValue:
    total = None
    for g, _ in diffs:
        term = _sum_squares(g)
        total = term if total is None else ad.add(total, term)
    return total


def loss_smo(flow_ab: DiffValue, flow_ba: DiffValue, reduction: str = "sum") -> DiffValue:
    """Squared forward-difference smoothness of both flows."""
    _check_reduction(reduction)
    total = _smoothness_of(_flow_differences(flow_ab, flow_ba))
    return _reduce(total, reduction, flow_ab.value.shape[1:])


def _estimated_inverse(flow: DiffValue) -> DiffValue:
    return ad.warp(ad.scalar_multiply(flow, -1.0), flow)


def loss_inv(flow_ab: DiffValue, flow_ba: DiffValue, reduction: str = "sum") -> DiffValue:
    """Squared disagreement of each flow with the other's estimated inverse."""
    _check_reduction(reduction)
    total = ad.add(
        _sum_squares(ad.subtract(flow_ab, _estimated_inverse(flow_ba))),
        _sum_squares(ad.subtract(flow_ba, _estimated_inverse(flow_ab))),
    )
    return _reduce(total, reduction, flow_ab.value.shape[1:])


def _antifold_axis_term(g: DiffValue, axis: int) -> DiffValue:
    shift = g.tape.constant(np.ones_like(g.value))
    q = ad.add(g, shift)
    # Only the diagonal component matters: component `axis` differenced
    # along axis `axis`. The fold gate q <= 0 selects the penalized
    # voxels; |q| = -q there.
    mask = np.zeros(g.value.shape, dtype=bool)
    mask[axis] = q.value[axis] <= 0.0
    return ad.masked_weighted_sum(mask, ad.scalar_multiply(q, -1.0), ad.square(g))


def _antifold_of(diffs) -> DiffValue:
    total = None
    for g, axis in diffs:
        term = _antifold_axis_term(g, axis)
        total = term if total is None else ad.add(total, term)
    return total


def loss_ant(flow_ab: DiffValue, flow_ba: DiffValue, reduction: str = "sum") -> DiffValue:
    """Anti-folding penalty |g + 1| * g^2 over folded (voxel, axis) pairs."""
    _check_reduction(reduction)
    total = _antifold_of(_flow_differences(flow_ab, flow_ba))
    return _reduce(total, reduction, flow_ab.value.shape[1:])


def _loss_inv_value(flow_ab: np.ndarray, flow_ba: np.ndarray, reduction: str) -> float:
    """Plain-array twin of :func:`loss_inv`, bit-identical to the graph value."""
    total = 0.0
    for flow, other in ((flow_ab, flow_ba), (flow_ba, flow_ab)):
        coords = sampler.base_grid(other.shape[1:]) + other
        est, _ = sampler._warp_forward(-1.0 * other, coords)
        diff = (flow - est).ravel()
        total = total + float(np.dot(diff, diff))
    if reduction == "mean":
        total = total * (1.0 / float(np.prod(flow_ab.shape[1:])))
    return total


def _loss_ant_value(flow_ab: np.ndarray, flow_ba: np.ndarray, reduction: str) -> float:
    """Plain-array twin of :func:`loss_ant`, bit-identical to the graph value."""
    total = 0.0
    for flow in (flow_ab, flow_ba):
        for axis in range(3):
            g = np.diff(flow[axis], axis=axis)
            q = g + 1.0
            sel = q <= 0.0
            total = total + float(np.dot((-1.0 * q)[sel], (g * g)[sel]))
    if reduction == "mean":
        total = total * (1.0 / float(np.prod(flow_ab.shape[1:])))
    return total


def folding_breakdown(flow) -> tuple[int, tuple[int, int, int]]:
    """Count folds (g + 1 <= 0) of a flow, total and per axis."""
    if isinstance(flow, Volume):
        arr = flow.data
    elif isinstance(flow, DiffValue):
        arr = flow.value
    else:
        arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise ValueError(f"flow must have shape (3, dx, dy, dz), got {arr.shape}")
    per_axis = []
    for axis in range(3):
        comp = arr[axis]
        g = np.diff(comp, axis=axis)
        per_axis.append(int(np.count_nonzero(g + 1.0 <= 0.0)))
    return sum(per_axis), (per_axis[0], per_axis[1], per_axis[2])


def folding_count(flow) -> int:
    """Total number of folded (voxel, axis) pairs in one flow."""
    return folding_breakdown(flow)[0]


def loss_total(
    img_a,
    img_b,
    flow_ab: DiffValue,
    flow_ba: DiffValue,
    weights: LossWeights,
    reduction: str = "sum",
) -> tuple[DiffValue, LossReport]:
    """Assemble the full objective.

    Returns the differentiable total plus a float report; the report's
    ``folding_count`` sums the folds of both flows.

    Terms whose weight is exactly zero are dropped from the graph, which
    is what a zero weight means for the gradient, but their report
    columns are still the true current values (computed without graph
    bookkeeping, bit-identical to the graph evaluation).
    """
    _check_reduction(reduction)
    extents = flow_ab.value.shape[1:]
    diffs = _flow_differences(flow_ab, flow_ba)
    sim = loss_sim(img_a, img_b, flow_ab, flow_ba, reduction)
    smo = _reduce(_smoothness_of(diffs), reduction, extents)
    total = sim
    total = ad.add(total, ad.scalar_multiply(smo, weights.alpha))
    if weights.beta != 0.0:
        inv = loss_inv(flow_ab, flow_ba, reduction)
        inv_value = float(inv.value)
        total = ad.add(total, ad.scalar_multiply(inv, weights.beta))
    else:
        inv_value = _loss_inv_value(flow_ab.value, flow_ba.value, reduction)
    if weights.gamma != 0.0:
        ant = _reduce(_antifold_of(diffs), reduction, extents)
        ant_value = float(ant.value)
        total = ad.add(total, ad.scalar_multiply(ant, weights.gamma))
    else:
        ant_value = _loss_ant_value(flow_ab.value, flow_ba.value, reduction)
    folds = folding_count(flow_ab) + folding_count(flow_ba)
    report = LossReport(
        sim=float(sim.value),
        smo=float(smo.value),
        inv=inv_value,
        ant=ant_value,
        total=float(total.value),
        folding_count=folds,
    )
    return total, report
