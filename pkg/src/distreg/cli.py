"""Command-line front end: simulate, distill, train, evaluate, benchmark.

Configuration precedence is flags > config file > defaults. The config
file is flat ``key=value`` text whose keys mirror the flag names; unknown
keys are rejected.

Exit codes: 0 success, 2 usage, 3 I/O, 4 empty-result guard, 5 numeric
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, model as mdl, pipeline, register, simulate
from .aggregate import ApgConfig
from .errors import (
    DistregError,
    EmptyResults,
    MalformedFile,
    NonFinite,
    NonFiniteLoss,
    NoPairs,
    NoPositives,
    NonRigidPose,
)
from .losses import LossConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_EMPTY = 4
EXIT_NUMERIC = 5


class CliIOError(DistregError):
    """I/O precondition failure surfaced to the user (exit 3)."""


class EmptyResultGuard(DistregError):
    """--require-nonempty hit an empty result (exit 4)."""


# ---------------------------------------------------------------------------
# Parser construction and config-file merging
# ---------------------------------------------------------------------------

def _add_common_out(p, required=True):
    p.add_argument("--out", required=required, help="output path")
    p.add_argument("--force", action="store_true", help="allow overwriting outputs")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="distreg",
        description="Distant point-cloud registration: simulation, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("simulate", help="write a synthetic LiDAR dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--extent", type=float, default=60.0)
    p.add_argument("--obstacles", type=int, default=12)
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--start-x", type=float, default=-15.0)
    p.add_argument("--start-y", type=float, default=0.0)
    p.add_argument("--heading", type=float, default=0.0, help="degrees")
    p.add_argument("--height", type=float, default=1.5)
    p.add_argument("--azimuth-steps", type=int, default=1024)
    p.add_argument("--rings", type=int, default=16)
    p.add_argument("--ring-lo", type=float, default=-15.0)
    p.add_argument("--ring-hi", type=float, default=5.0)
    p.add_argument("--max-range", type=float, default=80.0)
    p.add_argument("--noise-sigma", type=float, default=0.01)
    _add_common_out(p)
    p.set_defaults(func=cmd_simulate)
    commands["simulate"] = p

    p = sub.add_parser("distill", help="select registration pairs by distance and overlap")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-b", default=None)
    p.add_argument("--d1", type=float, default=0.0)
    p.add_argument("--d2", type=float, default=1e9)
    p.add_argument("--max-overlap", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--require-nonempty", action="store_true")
    _add_common_out(p)
    p.set_defaults(func=cmd_distill)
    commands["distill"] = p

    p = sub.add_parser("train", help="train the feature encoder")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-b", default=None)
    p.add_argument("--pairs", default=None, help="pairs file from `distill`")
    p.add_argument("--log", default=None, help="training log output path")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--m-pos", type=float, default=0.1)
    p.add_argument("--m-neg", type=float, default=1.4)
    p.add_argument("--phi", type=int, default=4)
    p.add_argument("--psi", type=int, default=3)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--scope-radius", type=float, default=50.0)
    p.add_argument("--voxel-size", type=float, default=0.3)
    p.add_argument("--input-voxel-size", type=float, default=0.0)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--decoder-hidden", default="512,256")
    p.add_argument("--decoder-variant", choices=["asymmetric", "symmetric"], default="asymmetric")
    p.add_argument("--n-disturb", type=int, default=0)
    p.add_argument("--curriculum", action="store_true")
    p.add_argument("--curriculum-d2", type=float, default=20.0)
    p.add_argument("--max-overlap", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.5)
    _add_common_out(p)
    p.set_defaults(func=cmd_train)
    commands["train"] = p

    p = sub.add_parser("evaluate", help="register pairs and report metrics")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--dataset-b", default=None)
    p.add_argument("--pairs", required=True)
    p.add_argument("--criterion", choices=["loose", "normal", "strict"], default="normal")
    p.add_argument("--ransac-iterations", type=int, default=50_000)
    p.add_argument("--inlier-threshold", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-voxel-size", type=float, default=0.0)
    p.add_argument("--bins", default=None, help="e.g. 5:20,20:35 — recall per distance bin")
    p.add_argument("--density-ratios", default=None, help="e.g. 0.1,0.2,0.5,1")
    p.add_argument("--oracle-gt", action="store_true",
                   help="score the ground-truth transform instead of registering")
    _add_common_out(p)
    p.set_defaults(func=cmd_evaluate)
    commands["evaluate"] = p

    p = sub.add_parser("benchmark", help="time the online stages")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default="1000,4000,16000")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ransac-iterations", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_benchmark)
    commands["benchmark"] = p

    return parser, commands


def load_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise CliIOError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise MalformedFile(f"{path}:{lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(parser, sub, argv, args):
    """Apply config-file values beneath the flags by resetting subparser
    defaults and re-parsing."""
    file_vals = load_config_file(args.config)
    known = {}
    for action in sub._actions:
        if action.dest in ("help", "config", "func"):
            continue
        known[action.dest] = action
    unknown = sorted(set(file_vals) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    converted = {}
    for key, raw in file_vals.items():
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            converted[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            converted[key] = action.type(raw)
        else:
            converted[key] = raw
    sub.set_defaults(**converted)
    return parser.parse_args(argv)


class UsageError(DistregError):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _check_input(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise CliIOError(f"{what} not found: {path}")
    return p


def _check_output_file(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise CliIOError(f"refusing to overwrite {path} (use --force)")
    if p.parent and not p.parent.exists():
        raise CliIOError(f"output directory does not exist: {p.parent}")
    return p


def _atomic_replace(write_fn, final_path: Path) -> None:
    tmp = final_path.with_name(final_path.name + f".tmp{os.getpid()}")
    try:
        write_fn(tmp)
        os.replace(tmp, final_path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _parse_bins(text: str) -> list[tuple[float, float]]:
    bins = []
    for part in text.split(","):
        if not part.strip():
            continue
        lo, _, hi = part.partition(":")
        bins.append((float(lo), float(hi)))
    return bins


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliIOError(f"refusing to overwrite non-empty {out} (use --force)")
    world = simulate.simulate_world(args.seed, args.extent, args.obstacles)
    lidar = simulate.LidarConfig(
        azimuth_steps=args.azimuth_steps,
        elevation_angles=tuple(np.linspace(args.ring_lo, args.ring_hi, args.rings)),
        max_range=args.max_range,
        range_noise_sigma=args.noise_sigma,
    )
    trajectory = simulate.line_trajectory(
        (args.start_x, args.start_y), args.heading, args.spacing, args.frames, args.height)
    seq = simulate.simulate_sequence(world, trajectory, lidar, seed=args.seed)
    meta = {
        "seed": args.seed, "extent": args.extent, "n_obstacles": args.obstacles,
        "lidar": {
            "azimuth_steps": lidar.azimuth_steps,
            "elevation_angles": list(lidar.elevation_angles),
            "max_range": lidar.max_range,
            "range_noise_sigma": lidar.range_noise_sigma,
        },
        "trajectory": {
            "kind": "line", "start_x": args.start_x, "start_y": args.start_y,
            "heading_deg": args.heading, "spacing": args.spacing,
            "frames": args.frames, "height": args.height,
        },
    }
    dataio.save_dataset(out, seq, meta)
    print(f"simulate: wrote {len(seq)} frames to {out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    seq_a = dataio.load_dataset(_check_input(args.dataset, "dataset"))
    seq_b = seq_a if args.dataset_b is None else dataio.load_dataset(
        _check_input(args.dataset_b, "dataset-b"))
    out = _check_output_file(args.out, args.force)
    spec = dataio.PairSpec(args.d1, args.d2, args.max_overlap)
    records = dataio.distill_records(seq_a, seq_b, spec, args.tau)
    if not records and args.require_nonempty:
        raise EmptyResultGuard("distillation produced zero pairs")
    _atomic_replace(lambda tmp: dataio.write_pairs_file(tmp, records), out)
    print(f"distill: {len(records)} pairs -> {out}")
    return EXIT_OK


def _train_config(args) -> pipeline.TrainConfig:
    decoder_hidden = tuple(_parse_int_list(args.decoder_hidden))
    return pipeline.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        input_voxel_size=args.input_voxel_size,
        model=mdl.ModelConfig(
            k=args.k, l=args.feature_dim, phi=args.phi,
            decoder_variant=args.decoder_variant, decoder_hidden=decoder_hidden,
        ),
        apg=ApgConfig(psi=args.psi, alpha=args.alpha,
                      scope_radius=args.scope_radius, voxel_size=args.voxel_size),
        loss=LossConfig(lambda1=args.lambda1, lambda2=args.lambda2,
                        m_p=args.m_pos, m_n=args.m_neg),
        n_disturb=args.n_disturb,
    )


def cmd_train(args) -> int:
    seq_a = dataio.load_dataset(_check_input(args.dataset, "dataset"))
    seq_b = seq_a if args.dataset_b is None else dataio.load_dataset(
        _check_input(args.dataset_b, "dataset-b"))
    out = _check_output_file(args.out, args.force)
    log_path = _check_output_file(args.log, args.force) if args.log else None
    cfg = _train_config(args)

    if args.curriculum:
        spec = pipeline.CurriculumSpec(
            d2=args.curriculum_d2, overlap_max=args.max_overlap, tau=args.tau)
        enc, dec, logs = pipeline.train_curriculum(seq_a, seq_b, cfg, spec)
        log = pipeline.TrainLog(
            steps=[s for lg in logs for s in lg.steps],
            epochs=[e for lg in logs for e in lg.epochs],
        )
    else:
        if not args.pairs:
            raise UsageError("--pairs is required unless --curriculum is set")
        records = dataio.read_pairs_file(_check_input(args.pairs, "pairs file"))
        if not records:
            raise NoPairs("pairs file is empty")
        enc, dec, log = pipeline.train(seq_a, seq_b, [(r.i, r.j) for r in records], cfg)

    _atomic_replace(lambda tmp: mdl.save_checkpoint(tmp, enc, dec), out)
    if log_path:
        _atomic_replace(lambda tmp: pipeline.write_train_log(tmp, log), log_path)
    final = log.steps[-1].total if log.steps else float("nan")
    print(f"train: {len(log.steps)} steps, final loss {final:.6f} -> {out}")
    return EXIT_OK


def _print_summary(records: list[register.PairResult]) -> None:
    summary = register.summarize_results(records)
    print(f"pairs evaluated: {summary['n_pairs']}")
    print("criterion thresholds: loose (5,2) / normal (1.5,0.6) / strict (0.5,0.3)")
    print("criterion,rr,mean_rre_success,mean_rte_success,mean_rre_all,mean_rte_all")
    for c in register.CRITERIA:
        e = summary[c.name]
        print(
            f"{c.name},{e['rr']:.4f},{e['mean_rre_success']:.4f},"
            f"{e['mean_rte_success']:.4f},{e['mean_rre_all']:.4f},{e['mean_rte_all']:.4f}"
        )


def _evaluate_records(args, seq_a, seq_b, pairs, enc, downsample=None):
    ransac = register.RansacConfig(
        iterations=args.ransac_iterations,
        inlier_threshold=args.inlier_threshold,
        seed=args.seed,
    )
    if args.oracle_gt:
        out = []
        for r in pairs:
            fa = seq_a[seq_a.position_of(r.i)]
            fb = seq_b[seq_b.position_of(r.j)]
            gt = pipeline.relative_gt(fa, fb)
            res = register.evaluate(gt, gt, register.CRITERIA, 0)
            out.append(register.PairResult(
                r.i, r.j, r.distance, r.overlap, res.rre, res.rte, res.success, 0))
        return out
    return pipeline.evaluate_pairs(
        seq_a, seq_b, pairs, enc, ransac, args.input_voxel_size, downsample=downsample)


def cmd_evaluate(args) -> int:
    seq_a = dataio.load_dataset(_check_input(args.dataset, "dataset"))
    seq_b = seq_a if args.dataset_b is None else dataio.load_dataset(
        _check_input(args.dataset_b, "dataset-b"))
    pairs = dataio.read_pairs_file(_check_input(args.pairs, "pairs file"))
    if not pairs:
        raise EmptyResultGuard("pairs file is empty")
    enc = None
    if not args.oracle_gt:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle-gt is set")
        enc, _ = mdl.load_checkpoint(_check_input(args.checkpoint, "checkpoint"))
    out = _check_output_file(args.out, args.force)
    criterion = register.criterion_by_name(args.criterion)

    if args.density_ratios:
        ratios = _parse_float_list(args.density_ratios)
        print("density protocol: ratio,rr,n_pairs")
        for ratio in ratios:
            downsample = (ratio, args.seed) if ratio < 1.0 else None
            records = _evaluate_records(args, seq_a, seq_b, pairs, enc, downsample)
            arm_path = out.with_name(f"{out.stem}.r{ratio:g}{out.suffix}")
            arm_path = _check_output_file(arm_path, args.force)
            _atomic_replace(lambda tmp, rec=records: register.write_results(tmp, rec), arm_path)
            rr = float(np.mean([r.success[criterion.name] for r in records]))
            print(f"{ratio:g},{rr:.4f},{len(records)}")
        return EXIT_OK

    records = _evaluate_records(args, seq_a, seq_b, pairs, enc)
    _atomic_replace(lambda tmp: register.write_results(tmp, records), out)
    _print_summary(records)

    if args.bins:
        bins = _parse_bins(args.bins)
        print("bin_lo,bin_hi,rr,n_pairs")
        for lo, hi in bins:
            grp = [r for r in records if lo <= r.distance <= hi]
            if not grp:
                print(f"{lo:g},{hi:g},,0")
                continue
            rr = float(np.mean([r.success[criterion.name] for r in grp]))
            print(f"{lo:g},{hi:g},{rr:.4f},{len(grp)}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    enc, _ = mdl.load_checkpoint(_check_input(args.checkpoint, "checkpoint"))
    sizes = _parse_int_list(args.sizes)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    rng = np.random.default_rng(args.seed)
    lines = ["stage,n,median_seconds"]
    for n in sizes:
        cloud_a = rng.uniform(-40, 40, size=(n, 3))
        cloud_b = rng.uniform(-40, 40, size=(n, 3))
        mdl.encoder_forward(cloud_a, enc)  # warm caches/allocator before timing
        t_enc, t_match, t_ransac = [], [], []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fa = mdl.encoder_forward(cloud_a, enc)
            t_enc.append(time.perf_counter() - t0)
            fb = mdl.encoder_forward(cloud_b, enc)
            t0 = time.perf_counter()
            corr = register.match_features(fa, fb)
            t_match.append(time.perf_counter() - t0)
            if len(corr) >= 3:
                t0 = time.perf_counter()
                register.ransac_register(
                    corr, cloud_a, cloud_b,
                    register.RansacConfig(iterations=args.ransac_iterations, seed=args.seed))
                t_ransac.append(time.perf_counter() - t0)
        lines.append(f"encoder,{n},{float(np.median(t_enc)):.6f}")
        lines.append(f"matching,{n},{float(np.median(t_match)):.6f}")
        if t_ransac:
            lines.append(f"ransac,{n},{float(np.median(t_ransac)):.6f}")
    report = "\n".join(lines)
    print(report)
    if args.out:
        out = _check_output_file(args.out, args.force)
        _atomic_replace(lambda tmp: Path(tmp).write_text(report + "\n"), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if getattr(args, "config", None):
            try:
                args = _merge_config(parser, commands[args.command], argv, args)
            except SystemExit as exc:
                return int(exc.code or 0)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CliIOError, OSError, MalformedFile, NonRigidPose) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (EmptyResultGuard, NoPairs, NoPositives, EmptyResults) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (NonFiniteLoss, NonFinite) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
