"""Unsupervised training loop, Adam updates, and per-pair refinement.

Training consumes a dataset of single-channel volumes on one grid. A
deterministic split reserves a validation fraction of the volumes; each
iteration draws one unordered volume pair uniformly at random from the
training split, predicts both directed flows with shared parameters,
evaluates the full objective, backpropagates, and applies one Adam
step. Every ``val_interval`` iterations the mean loss over a fixed set
of validation pairs is recorded.

All randomness (split, pair sampling, parameter init) derives from the
single config seed, so identical configs reproduce identical curves,
parameters, and checkpoint bytes.

Refinement adapts a copy of trained parameters to one specific pair
with a short run of small Adam steps from a fresh optimizer state; the
input parameters are never mutated.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import network
from .autodiff import Tape
from .losses import LossReport, LossWeights, loss_total
from .network import FcnConfig
from .volume import Volume


class NumericError(Exception):
    """Training or evaluation produced a non-finite quantity."""


_ALLOCATOR_TUNED = False


def _tune_allocator() -> None:
    """Keep large reusable buffers on the heap across iterations.

    Every optimization step allocates and frees on the order of 100 MB
    of convolution workspace. With glibc defaults those blocks are
    mmapped and returned to the kernel on free, so each iteration pays
    page-fault and zeroing costs again. Raising the mmap and trim
    thresholds once per process lets the allocator recycle the blocks,
    which is worth roughly 20% of training time. Best effort: on
    platforms without glibc's mallopt this quietly does nothing.
    """
    global _ALLOCATOR_TUNED
    if _ALLOCATOR_TUNED:
        return
    _ALLOCATOR_TUNED = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        m_trim_threshold, m_mmap_threshold = -1, -3
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except (OSError, AttributeError):
        pass


@dataclass(frozen=True)
class TrainConfig:
    """Full recipe for one training run."""

    weights: LossWeights = field(default_factory=LossWeights)
    fcn: FcnConfig = field(default_factory=FcnConfig)
    learning_rate: float = 5e-4
    iterations: int = 2000
    validation_fraction: float = 0.1
    val_interval: int = 50
    seed: int = 0
    refine_learning_rate: float = 1e-5
    refine_iterations: int = 100
    reduction: str = "sum"

    def __post_init__(self):
        if not (0.0 < float(self.validation_fraction) < 1.0):
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction!r}"
            )
        if self.iterations < 0 or self.refine_iterations < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.val_interval < 1:
            raise ValueError(f"val_interval must be >= 1, got {self.val_interval!r}")
        for name in ("learning_rate", "refine_learning_rate"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0.0:
                raise ValueError(f"{name} must be positive, got {v!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs stay untouched."""
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    t = state.step + 1
    new_params = {}
    new_m = {}
    new_v = {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {params[name].shape}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


@dataclass(frozen=True)
class CurveRow:
    """One row of the loss-curve CSV."""

    iteration: int
    split: str  # "train" or "val"
    sim: float
    smo: float
    inv: float
    ant: float
    total: float
    folding_count: float


CURVE_HEADER = "iteration,split,sim,smo,inv,ant,total,folding_count"


def _fmt_count(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def curve_csv_lines(rows) -> list[str]:
    lines = [CURVE_HEADER]
    for r in rows:
        cells = [str(r.iteration), r.split]
        cells += [repr(float(v)) for v in (r.sim, r.smo, r.inv, r.ant, r.total)]
        cells.append(_fmt_count(r.folding_count))
        lines.append(",".join(cells))
    return lines


def write_curves(rows, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(curve_csv_lines(rows)) + "\n")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    rows: list[CurveRow]
    train_indices: list[int]
    val_indices: list[int]


def _validate_dataset(volumes, config: TrainConfig) -> None:
    if len(volumes) < 2:
        raise ValueError(f"training needs at least 2 volumes, got {len(volumes)}")
    first = volumes[0]
    for i, vol in enumerate(volumes):
        if not isinstance(vol, Volume):
            raise TypeError(f"dataset entry {i} is not a Volume")
        if vol.channels != 1:
            raise ValueError(f"dataset entry {i} must be single channel, got {vol.channels}")
        if tuple(vol.extents) != tuple(first.extents):
            raise ValueError(
                f"dataset entry {i} extents {tuple(vol.extents)} differ from {tuple(first.extents)}"
            )
    network.check_pair(config.fcn, first, first)


def split_dataset(n: int, fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Deterministic disjoint train/validation index split.

    At least two volumes always stay in the training split; with only
    two volumes there is no validation split at all.
    """
    perm = [int(i) for i in rng.permutation(n)]
    n_val = int(round(fraction * n)) if n > 2 else 0
    n_val = max(1, n_val) if n > 2 else 0
    n_val = min(n_val, n - 2)
    return perm[n_val:], perm[:n_val]


def _validation_pairs(train_idx, val_idx, rng: np.random.Generator, cap: int = 10):
    """Fixed pair set used for the validation curve.

    Pairs come from inside the validation split when it holds at least
    two volumes. A lone validation volume is paired with the first
    training volume so the curve still tracks an unseen pairing.
    """
    if len(val_idx) >= 2:
        pairs = [(val_idx[i], val_idx[j]) for i in range(len(val_idx)) for j in range(i + 1, len(val_idx))]
        if len(pairs) > cap:
            keep = rng.choice(len(pairs), size=cap, replace=False)
            pairs = [pairs[int(k)] for k in sorted(keep)]
        return pairs
    if len(val_idx) == 1:
        return [(val_idx[0], train_idx[0])]
    return []


def _loss_graph(params, config: TrainConfig, vol_a: Volume, vol_b: Volume, trainable: bool):
    tape = Tape()
    nodes = network.param_leaves(tape, params, trainable=trainable)
    flow_ab, flow_ba = network.build_bidirectional(
        nodes, config.fcn, tape.constant(vol_a.data), tape.constant(vol_b.data)
    )
    total, report = loss_total(
        vol_a.data, vol_b.data, flow_ab, flow_ba, config.weights, config.reduction
    )
    return tape, nodes, flow_ab, flow_ba, total, report


def evaluate_pair(
    params: dict[str, np.ndarray], config: TrainConfig, vol_a: Volume, vol_b: Volume
) -> tuple[Volume, Volume, LossReport]:
    """Predict both flows for a pair and report its losses (no gradients)."""
    network.check_pair(config.fcn, vol_a, vol_b)
    tape, _, flow_ab, flow_ba, _, report = _loss_graph(params, config, vol_a, vol_b, trainable=False)
    out = Volume(flow_ab.value), Volume(flow_ba.value), report
    tape.release()
    return out


def _training_step(params, state, config: TrainConfig, vol_a, vol_b, lr):
    tape, nodes, _, _, total, report = _loss_graph(params, config, vol_a, vol_b, trainable=True)
    if not np.isfinite(report.total):
        raise NumericError(f"non-finite loss {report.total!r}")
    tape.backward(total)
    grads = {}
    for name, node in nodes.items():
        grads[name] = node.adjoint if node.adjoint is not None else np.zeros_like(params[name])
    tape.release()
    new_params, new_state = adam_step(params, grads, state, lr)
    return new_params, new_state, report


def _mean_validation_report(params, config, volumes, pairs) -> LossReport:
    reports = [evaluate_pair(params, config, volumes[i], volumes[j])[2] for i, j in pairs]
    k = float(len(reports))
    return LossReport(
        sim=sum(r.sim for r in reports) / k,
        smo=sum(r.smo for r in reports) / k,
        inv=sum(r.inv for r in reports) / k,
        ant=sum(r.ant for r in reports) / k,
        total=sum(r.total for r in reports) / k,
        folding_count=sum(r.folding_count for r in reports),
    )


def train(volumes, config: TrainConfig, progress=None) -> TrainResult:
    """Run the full unsupervised loop and return parameters plus curves."""
    _tune_allocator()
    _validate_dataset(volumes, config)
    seed_seq = np.random.SeedSequence(config.seed)
    init_seq, split_seq, pair_seq = seed_seq.spawn(3)

    params = network.init_params(config.fcn, init_seq)
    split_rng = np.random.default_rng(split_seq)
    train_idx, val_idx = split_dataset(len(volumes), config.validation_fraction, split_rng)
    val_pairs = _validation_pairs(train_idx, val_idx, split_rng)

    pair_rng = np.random.default_rng(pair_seq)
    state = init_adam(params)
    rows: list[CurveRow] = []
    for it in range(1, config.iterations + 1):
        i, j = pair_rng.choice(len(train_idx), size=2, replace=False)
        vol_a, vol_b = volumes[train_idx[int(i)]], volumes[train_idx[int(j)]]
        try:
            params, state, report = _training_step(params, state, config, vol_a, vol_b, config.learning_rate)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}") from exc
        rows.append(
            CurveRow(it, "train", report.sim, report.smo, report.inv, report.ant, report.total, report.folding_count)
        )
        if val_pairs and it % config.val_interval == 0:
            vr = _mean_validation_report(params, config, volumes, val_pairs)
            rows.append(CurveRow(it, "val", vr.sim, vr.smo, vr.inv, vr.ant, vr.total, vr.folding_count / len(val_pairs)))
        if progress is not None:
            progress(it, rows[-1])
    return TrainResult(params=params, rows=rows, train_indices=train_idx, val_indices=val_idx)


def refine(
    params: dict[str, np.ndarray], config: TrainConfig, vol_a: Volume, vol_b: Volume
) -> dict[str, np.ndarray]:
    """Adapt a copy of ``params`` to one pair; the originals stay intact."""
    _tune_allocator()
    network.check_pair(config.fcn, vol_a, vol_b)
    network.validate_params(config.fcn, params)
    adapted = {k: p.copy() for k, p in params.items()}
    state = init_adam(adapted)
    for it in range(1, config.refine_iterations + 1):
        try:
            adapted, state, _ = _training_step(
                adapted, state, config, vol_a, vol_b, config.refine_learning_rate
            )
        except NumericError as exc:
            raise NumericError(f"refine iteration {it}: {exc}") from exc
    return adapted


def moving_average(values, window: int) -> list[float]:
    """Trailing moving average, defined from index window-1 onward."""
    out = []
    acc = 0.0
    vals = [float(v) for v in values]
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        if i >= window - 1:
            out.append(acc / window)
    return out


def grid_search(volumes, base_config: TrainConfig, alphas, betas) -> list[tuple[float, float, float]]:
    """Score every (alpha, beta) combination by final validation total.

    Each cell trains with the base config's budget and seed; the
    returned triples are ``(alpha, beta, score)`` where the score is the
    last validation row's total (or the last training row's total when
    the dataset is too small for a validation split).
    """
    results = []
    for alpha in alphas:
        for beta in betas:
            weights = dataclasses.replace(base_config.weights, alpha=float(alpha), beta=float(beta))
            config = dataclasses.replace(base_config, weights=weights)
            result = train(volumes, config)
            val_rows = [r for r in result.rows if r.split == "val"]
            score_rows = val_rows if val_rows else result.rows
            score = score_rows[-1].total if score_rows else float("nan")
            results.append((float(alpha), float(beta), float(score)))
    return results
