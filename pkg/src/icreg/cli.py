"""Command-line interface: one binary, one subcommand per pipeline stage.

Exit codes: 0 success, 2 usage errors, 3 data errors (unreadable or
malformed files, mismatched grids, bad config keys), 4 numeric failures
(non-finite losses, non-convergent inversions). Every failure prints a
single diagnostic line to stderr.

Config files are plain ``key = value`` text; ``#`` starts a comment.
Unknown keys are hard errors. Recognized keys and defaults:

    alpha = 1.0                 beta = 0.1              gamma = 100000.0
    learning_rate = 0.0005      iterations = 2000       seed = 0
    validation_fraction = 0.1   val_interval = 50       reduction = sum
    start_channels = 8          depth = 2               max_disp = 7.0
    refine_learning_rate = 1e-05                        refine_iterations = 100

Commands that create a run directory take an exclusive lock file inside
it for the duration of the run, so one directory is never owned by two
processes at once.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import network, synth, trainer
from .losses import LossWeights, folding_breakdown
from .network import FcnConfig
from .sampler import warp, warp_nearest
from .trainer import NumericError, TrainConfig
from .volume import (
    Volume,
    VolumeError,
    export_slice,
    load_labelmap,
    load_landmarks,
    load_volume,
    save_labelmap,
    save_landmarks,
    save_volume,
)


class UsageError(Exception):
    """Bad command invocation that argparse could not catch."""


class DataError(Exception):
    """Input files or directories are missing, malformed, or inconsistent."""


_CONFIG_KEYS = {
    "alpha": float,
    "beta": float,
    "gamma": float,
    "learning_rate": float,
    "iterations": int,
    "validation_fraction": float,
    "val_interval": int,
    "seed": int,
    "start_channels": int,
    "depth": int,
    "max_disp": float,
    "refine_learning_rate": float,
    "refine_iterations": int,
    "reduction": str,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; unknown keys and bad values are errors."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep or not key or not value:
            raise DataError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in _CONFIG_KEYS:
            raise DataError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise DataError(f"{source}:{lineno}: duplicate config key {key!r}")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = caster(value)
        except ValueError as exc:
            raise DataError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def build_train_config(config_path=None, seed_override=None, iterations_override=None) -> TrainConfig:
    values: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        values = parse_config_text(path.read_text(encoding="ascii"), str(path))
    if seed_override is not None:
        values["seed"] = int(seed_override)
    if iterations_override is not None:
        values["iterations"] = int(iterations_override)
    weights = LossWeights(
        alpha=values.pop("alpha", 1.0),
        beta=values.pop("beta", 0.1),
        gamma=values.pop("gamma", 1e5),
    )
    fcn = FcnConfig(
        start_channels=values.pop("start_channels", 8),
        depth=values.pop("depth", 2),
        max_disp=values.pop("max_disp", 7.0),
    )
    try:
        return TrainConfig(weights=weights, fcn=fcn, **values)
    except ValueError as exc:
        raise DataError(f"invalid config: {exc}") from exc


def config_manifest_lines(config: TrainConfig) -> list[str]:
    return [
        "ICRUN1",
        "format_versions icvol=1 checkpoint=1 curves=1",
        f"alpha = {config.weights.alpha!r}",
        f"beta = {config.weights.beta!r}",
        f"gamma = {config.weights.gamma!r}",
        f"learning_rate = {config.learning_rate!r}",
        f"iterations = {config.iterations}",
        f"validation_fraction = {config.validation_fraction!r}",
        f"val_interval = {config.val_interval}",
        f"seed = {config.seed}",
        f"start_channels = {config.fcn.start_channels}",
        f"depth = {config.fcn.depth}",
        f"max_disp = {config.fcn.max_disp!r}",
        f"refine_learning_rate = {config.refine_learning_rate!r}",
        f"refine_iterations = {config.refine_iterations}",
        f"reduction = {config.reduction}",
    ]


@contextlib.contextmanager
def run_lock(directory: Path):
    """Own a run directory exclusively while the command runs."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"run directory is locked by another process: {directory}") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) != 3:
        raise UsageError(f"--shape expects DXxDYxDZ, got {text!r}")
    try:
        ext = tuple(int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--shape expects integers, got {text!r}") from None
    return ext


def cmd_synth(args) -> int:
    out = Path(args.out)
    with run_lock(out):
        synth.write_dataset(
            out,
            seed=args.seed,
            shape=_parse_shape(args.shape),
            num_pairs=args.pairs,
            max_disp=args.max_disp,
            num_blobs=args.blobs,
        )
    print(f"wrote {args.pairs} pairs under {out}")
    return 0


def _load_training_volumes(data_dir, holdout=0):
    info = synth.load_dataset(data_dir)
    return info, synth.training_volumes(info, holdout=holdout)


def cmd_train(args) -> int:
    config = build_train_config(args.config, args.seed, args.iterations)
    _, volumes = _load_training_volumes(args.data)
    out = Path(args.out)
    with run_lock(out):
        result = trainer.train(volumes, config)
        network.save_checkpoint(out / "checkpoint", result.params, config.fcn)
        trainer.write_curves(result.rows, out / "curves.csv")
        with open(out / "manifest.txt", "w", encoding="ascii") as f:
            f.write("\n".join(config_manifest_lines(config)) + "\n")
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"finished {config.iterations} iterations; final total {last.total!r}")
    print(f"checkpoint at {out / 'checkpoint'}; curves at {out / 'curves.csv'}")
    return 0


def _load_checkpoint(path) -> tuple[dict, FcnConfig]:
    ckpt = Path(path)
    if not ckpt.is_dir():
        raise DataError(f"checkpoint directory not found: {ckpt}")
    return network.load_checkpoint(ckpt)


def _config_with_fcn(args, fcn: FcnConfig) -> TrainConfig:
    config = build_train_config(getattr(args, "config", None), getattr(args, "seed", None), None)
    return dataclasses.replace(config, fcn=fcn)


def cmd_register(args) -> int:
    params, fcn = _load_checkpoint(args.ckpt)
    vol_a = load_volume(args.a)
    vol_b = load_volume(args.b)
    config = _config_with_fcn(args, fcn)
    if args.refine:
        params = trainer.refine(params, config, vol_a, vol_b)
    flow_ab, flow_ba, report = trainer.evaluate_pair(params, config, vol_a, vol_b)
    if args.out_flow_ab:
        save_volume(flow_ab, args.out_flow_ab)
    if args.out_flow_ba:
        save_volume(flow_ba, args.out_flow_ba)
    if args.out_warped:
        save_volume(warp(vol_a, flow_ab), args.out_warped)
    if args.out_warped_b:
        save_volume(warp(vol_b, flow_ba), args.out_warped_b)
    print(
        "registered: "
        f"sim {report.sim!r} smo {report.smo!r} inv {report.inv!r} "
        f"ant {report.ant!r} total {report.total!r} folds {report.folding_count}"
    )
    return 0


def _scan_atlases(directory, annotation_suffix: str):
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"atlas directory not found: {root}")
    atlases = []
    for vol_path in sorted(root.glob("*.icvol")):
        name = vol_path.name
        if name.endswith(".labels.icvol"):
            continue
        ann = vol_path.with_name(vol_path.stem + annotation_suffix)
        if ann.is_file():
            atlases.append((vol_path, ann))
    if not atlases:
        raise DataError(f"no atlas volumes with {annotation_suffix} annotations under {root}")
    return atlases


def cmd_segment(args) -> int:
    params, fcn = _load_checkpoint(args.ckpt)
    test = load_volume(args.test)
    config = _config_with_fcn(args, fcn)
    propagated = []
    for vol_path, labels_path in _scan_atlases(args.atlases, ".labels.icvol"):
        atlas = load_volume(vol_path)
        labels = load_labelmap(labels_path)
        flow_ab, _, _ = trainer.evaluate_pair(params, config, atlas, test)
        propagated.append(warp_nearest(labels, flow_ab))
    fused = metrics_mod.multi_atlas_segment(propagated)
    save_labelmap(fused, args.out)
    print(f"fused {len(propagated)} atlases into {args.out}")
    return 0


def cmd_landmarks(args) -> int:
    params, fcn = _load_checkpoint(args.ckpt)
    test = load_volume(args.test)
    config = _config_with_fcn(args, fcn)
    per_atlas = []
    for vol_path, lm_path in _scan_atlases(args.atlases, ".landmarks.txt"):
        atlas = load_volume(vol_path)
        landmarks = load_landmarks(lm_path)
        _, flow_ba, _ = trainer.evaluate_pair(params, config, atlas, test)
        per_atlas.append((flow_ba, landmarks))
    mapped = metrics_mod.propagate_landmarks(per_atlas)
    save_landmarks(mapped, args.out)
    print(f"propagated {len(mapped)} landmarks from {len(per_atlas)} atlases into {args.out}")
    return 0


def cmd_metrics(args) -> int:
    pred = load_labelmap(args.pred)
    truth = load_labelmap(args.truth)
    image = Path(args.pred).stem
    rows = []
    labels = sorted(int(v) for v in np.unique(truth.labels) if v != 0)
    if not labels:
        raise DataError(f"{args.truth}: ground truth has no foreground labels")
    for label in labels:
        dsc, sen, ppv = metrics_mod.overlap_metrics(pred, truth, label)
        item = f"label_{label}"
        rows.append((image, item, "dsc", dsc))
        rows.append((image, item, "sen", sen))
        rows.append((image, item, "ppv", ppv))
        if (pred.labels == label).any():
            asd, hd = metrics_mod.surface_distances(pred, truth, label)
        else:
            asd, hd = float("nan"), float("nan")
        rows.append((image, item, "asd", asd))
        rows.append((image, item, "hd", hd))
    if args.landmarks_pred or args.landmarks_truth:
        if not (args.landmarks_pred and args.landmarks_truth):
            raise UsageError("--landmarks-pred and --landmarks-truth must be given together")
        errors, mean = metrics_mod.landmark_error(
            load_landmarks(args.landmarks_pred), load_landmarks(args.landmarks_truth)
        )
        for i, err in enumerate(errors):
            rows.append((image, f"landmark_{i}", "error", float(err)))
        rows.append((image, "landmark_mean", "error", mean))
    metrics_mod.write_metrics_csv(rows, args.out)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


def cmd_folding(args) -> int:
    flow = load_volume(args.flow)
    total, (fx, fy, fz) = folding_breakdown(flow)
    print(f"folding_count {total}")
    print(f"x {fx}")
    print(f"y {fy}")
    print(f"z {fz}")
    return 0


def cmd_ablate(args) -> int:
    config = build_train_config(args.config, args.seed, args.iterations)
    info = synth.load_dataset(args.data)
    holdout = args.holdout if args.holdout is not None else max(1, len(info.pair_dirs) // 5)
    if holdout >= len(info.pair_dirs):
        raise DataError(
            f"holdout {holdout} leaves no training pairs out of {len(info.pair_dirs)}"
        )
    volumes = synth.training_volumes(info, holdout=holdout)
    heldout_dirs = info.pair_dirs[len(info.pair_dirs) - holdout :]

    variants = [
        ("full", config.weights),
        ("no_inverse", dataclasses.replace(config.weights, beta=0.0)),
        ("no_antifold", dataclasses.replace(config.weights, gamma=0.0)),
    ]
    out = Path(args.out)
    summary = ["variant,pair,sim,smo,inv,ant,total,folds_ab,folds_ba"]
    with run_lock(out):
        for name, weights in variants:
            vconfig = dataclasses.replace(config, weights=weights)
            result = trainer.train(volumes, vconfig)
            vdir = out / name
            vdir.mkdir(parents=True, exist_ok=True)
            network.save_checkpoint(vdir / "checkpoint", result.params, vconfig.fcn)
            trainer.write_curves(result.rows, vdir / "curves.csv")
            with open(vdir / "manifest.txt", "w", encoding="ascii") as f:
                f.write("\n".join(config_manifest_lines(vconfig)) + "\n")
            for pdir in heldout_dirs:
                sample = synth.load_pair(pdir)
                flow_ab, flow_ba, report = trainer.evaluate_pair(
                    result.params, vconfig, sample.vol_a, sample.vol_b
                )
                folds_ab = folding_breakdown(flow_ab)[0]
                folds_ba = folding_breakdown(flow_ba)[0]
                summary.append(
                    ",".join(
                        [name, pdir.name]
                        + [repr(float(v)) for v in (report.sim, report.smo, report.inv, report.ant, report.total)]
                        + [str(folds_ab), str(folds_ba)]
                    )
                )
        with open(out / "summary.csv", "w", encoding="ascii", newline="\n") as f:
            f.write("\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return 0


def cmd_gridsearch(args) -> int:
    config = build_train_config(args.config, args.seed, args.iterations)
    _, volumes = _load_training_volumes(args.data)
    try:
        alphas = [float(a) for a in args.alphas.split(",")]
        betas = [float(b) for b in args.betas.split(",")]
    except ValueError:
        raise UsageError("--alphas/--betas expect comma-separated numbers") from None
    results = trainer.grid_search(volumes, config, alphas, betas)
    lines = ["alpha,beta,score"]
    lines += [f"{a!r},{b!r},{s!r}" for a, b, s in results]
    if args.out:
        with open(args.out, "w", encoding="ascii", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    best = min(results, key=lambda t: t[2])
    print(f"best alpha {best[0]!r} beta {best[1]!r} score {best[2]!r}")
    return 0


def cmd_export_slice(args) -> int:
    vol = load_volume(args.input)
    export_slice(vol, args.axis, args.index, args.out)
    print(f"wrote slice to {args.out}")
    return 0


_DECADES = "1e-05,0.0001,0.001,0.01,0.1,1.0,10.0,100.0,1000.0,10000.0,100000.0"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icreg",
        description="Inverse-consistent deformable registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="24x24x24", help="grid extents, e.g. 24x24x24")
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--max-disp", type=float, default=3.0, dest="max_disp")
    p.add_argument("--blobs", type=int, default=5, help="gaussian blobs per volume")
    p.add_argument("out", help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the flow predictor on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--iterations", type=int, default=None, help="overrides the config iterations")
    p.add_argument("--out", required=True, help="run directory for checkpoint and curves")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="predict flows for one volume pair")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--a", required=True, help="first volume (warped toward the second)")
    p.add_argument("--b", required=True, help="second volume")
    p.add_argument("--refine", action="store_true", help="adapt parameters to this pair first")
    p.add_argument("--config", default=None, help="config file for loss weights and refine budget")
    p.add_argument("--out-flow-ab", default=None)
    p.add_argument("--out-flow-ba", default=None)
    p.add_argument("--out-warped", default=None, help="first volume warped toward the second")
    p.add_argument("--out-warped-b", default=None, help="second volume warped toward the first")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("segment", help="multi-atlas segmentation by label fusion")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--atlases", required=True, help="directory of NAME.icvol + NAME.labels.icvol")
    p.add_argument("--test", required=True, help="volume to segment")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="fused label map path")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("landmarks", help="propagate atlas landmarks to a test volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--atlases", required=True, help="directory of NAME.icvol + NAME.landmarks.txt")
    p.add_argument("--test", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output landmark text file")
    p.set_defaults(func=cmd_landmarks)

    p = sub.add_parser("metrics", help="segmentation and landmark accuracy table")
    p.add_argument("--pred", required=True, help="predicted label map")
    p.add_argument("--truth", required=True, help="ground-truth label map")
    p.add_argument("--landmarks-pred", default=None)
    p.add_argument("--landmarks-truth", default=None)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("folding", help="count folded voxel transitions of a flow")
    p.add_argument("--flow", required=True, help="flow volume (3 channels)")
    p.set_defaults(func=cmd_folding)

    p = sub.add_parser("ablate", help="train and compare full / no-inverse / no-antifold runs")
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--holdout", type=int, default=None, help="trailing pairs kept out of training")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gridsearch", help="score loss-weight combinations on validation data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alphas", default=_DECADES, help="comma-separated smoothness weights")
    p.add_argument("--betas", default=_DECADES, help="comma-separated inverse-consistency weights")
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("export-slice", help="write one slice as a PGM/PPM image")
    p.add_argument("--in", dest="input", required=True, help="ICVOL volume or flow")
    p.add_argument("--axis", default="z", choices=["x", "y", "z"])
    p.add_argument("--index", type=int, required=True)
    p.add_argument("out", help="output image path")
    p.set_defaults(func=cmd_export_slice)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (VolumeError, DataError, OSError, ValueError, TypeError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, synth.NonConvergentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())
