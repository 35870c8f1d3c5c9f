"""Command-line experiment runner.

Subcommands: ``generate``, ``train``, ``evaluate``, ``infer`` and
``compare-optimizers``. Exit status is 0 on success, 1 for usage or
configuration errors, 2 for file problems and 3 for numeric failures.
Existing outputs are never overwritten without ``--force``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import (
    ConfigError,
    FileFormatError,
    GradientExplosionError,
    IncompatibleCheckpointError,
    NonFiniteGradientError,
    SpecMismatchError,
    TrainingDivergedError,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
# Targets are split into fixed-size chunks; results never depend on --jobs.
TARGET_CHUNK = 25
TEST_SEED_OFFSET = 1_000_003

log = logging.getLogger("trunksnn")


class OutputExistsError(OSError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _writable(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"{path} already exists (pass --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


# --- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    from .encoding import export_csv, generate_dataset, save_dataset

    cfg = _config(args)
    if args.variant is not None:
        cfg.arm.variant = args.variant
    if args.joints is not None:
        cfg.arm.n_joints = args.joints
    spec = cfg.arm_spec()
    n = args.samples
    if n is None:
        n = cfg.data.train_samples if args.role == "train" else cfg.data.test_samples
    seed = cfg.seed + (TEST_SEED_OFFSET if args.role == "test" else 0)
    out = _writable(args.out, args.force)
    csv_out = _writable(args.csv, args.force) if args.csv else None
    ds = generate_dataset(spec, n, seed, p_edge=cfg.data.p_edge)
    save_dataset(ds, out)
    if csv_out:
        export_csv(ds, csv_out)
    ee = ds.positions[:, -1]
    print(f"wrote {len(ds)} {args.role} samples to {out}")
    print(f"normalization (mean inter-joint distance): {ds.normalization:.6f} mm")
    for axis, lo, hi in zip("xyz", ee.min(axis=0), ee.max(axis=0)):
        print(f"end-effector {axis}: [{lo:.2f}, {hi:.2f}] mm")
    return EXIT_OK


# --- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    from .encoding import load_dataset
    from .training import load_checkpoint, save_checkpoint, train, write_history_csv

    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.hidden is not None:
        cfg.model.n_hidden = args.hidden
    train_set = load_dataset(args.data)
    test_set = load_dataset(args.test) if args.test else None
    if args.config:
        train_set.check_spec(cfg.arm_spec())
    cfg.arm.n_joints = train_set.spec.n_joints
    out = _writable(args.out, args.force)
    metrics = _writable(args.metrics or str(out) + ".csv", args.force)

    resume = load_checkpoint(args.resume) if args.resume else None
    every = args.checkpoint_every or cfg.train.checkpoint_every or None

    def on_checkpoint(ck):
        save_checkpoint(ck, out)
        write_history_csv(ck.history, metrics)

    # A resumed run keeps its stored schedule unless the command line changes it.
    keep = resume is not None and not (args.config or args.set or args.epochs or args.hidden)
    try:
        ckpt, history = train(
            train_set, None if keep else cfg.train_config(),
            test_set=test_set, neuron=cfg.neuron(), topo=cfg.topology(), resume=resume,
            checkpoint_every=every, on_checkpoint=on_checkpoint, max_updates=args.max_updates,
        )
    except TrainingDivergedError as exc:
        save_checkpoint(exc.checkpoint, out)
        raise
    save_checkpoint(ckpt, out)
    write_history_csv(history, metrics)
    print(f"trained {ckpt.step} updates; checkpoint {out}, metrics {metrics}")
    if history:
        last = history[-1]
        print(f"final epoch loss {last['loss']:.6f}, test end-effector median "
              f"{last['test_pos_mm']:.3f} mm / {last['test_rot_deg']:.3f} deg")
    return EXIT_OK


# --- evaluate ---------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .encoding import load_dataset
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    r = evaluate(ckpt, ds)
    report = {k: v for k, v in r.items() if k not in ("pos_err_mm", "rot_err_deg")}
    text = json.dumps(report, indent=2)
    if args.out:
        _writable(args.out, args.force).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --- inference ----------------------------------------------------------------

def _read_targets(path, spec, gamma1, gamma2):
    """Targets from a CSV of x_mm, y_mm, z_mm, qw, qx, qy, qz; bad rows are reported and skipped."""
    from .inference import InferenceTarget

    targets, ids = [], []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    for i, row in enumerate(rows):
        try:
            vals = np.array([float(v) for v in row], dtype=float)
            if vals.shape != (7,):
                raise ValueError("expected 7 columns")
            p, q = vals[:3], vals[3:]
            if np.linalg.norm(p) > spec.max_reach:
                raise ValueError(f"position {np.linalg.norm(p):.1f} mm from base exceeds reach {spec.max_reach:.1f} mm")
            targets.append(InferenceTarget(p, q / np.linalg.norm(q) if abs(np.linalg.norm(q) - 1) < 1e-3 else q,
                                           gamma1, gamma2))
            ids.append(i)
        except ValueError as exc:
            print(f"warning: target row {i} skipped: {exc}", file=sys.stderr)
    return targets, ids


def _is_number(text) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _run_chunk(payload):
    from .inference import run_batch

    start, targets, ckpt, spec, opts = payload
    return run_batch(start, targets, ckpt, spec, opts)


def run_targets(start, targets, ckpt, spec, opts, jobs: int = 1):
    """Run all targets in fixed chunks, optionally over worker processes."""
    chunks = [(start, targets[i:i + TARGET_CHUNK], ckpt, spec, opts) for i in range(0, len(targets), TARGET_CHUNK)]
    if jobs <= 1 or len(chunks) <= 1:
        results = [_run_chunk(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_chunk, chunks))
    return [r for chunk in results for r in chunk]


def _start_gears(spec, args):
    from .kinematics import GearState

    if getattr(args, "start", None):
        vals = np.array([float(v) for v in args.start.split(",")], dtype=float)
        return GearState(vals.reshape(spec.n_joints, 3), spec).values
    return GearState.neutral(spec).values


def _infer_options(cfg, args):
    opts = cfg.infer_options()
    if args.no_correction:
        opts.correction = False
    if args.max_iters is not None:
        opts.max_iters = args.max_iters
    if args.eta0 is not None:
        opts.eta0 = args.eta0
    if getattr(args, "optimizer", None):
        opts.optimizer = args.optimizer
    return opts


def cmd_infer(args) -> int:
    from .inference import error_matrix, sample_targets, write_curve_csv, write_summary_csv, write_trajectory_csv
    from .training import load_checkpoint

    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    spec = ckpt.spec
    opts = _infer_options(cfg, args)
    if args.targets_file:
        targets, ids = _read_targets(args.targets_file, spec, cfg.infer.gamma1, cfg.infer.gamma2)
    else:
        n = args.targets if args.targets is not None else cfg.infer.targets
        targets, _ = sample_targets(spec, np.random.default_rng(cfg.seed), n, cfg.infer.gamma1, cfg.infer.gamma2)
        ids = list(range(n))
    out_dir = Path(args.out_dir)
    summary = _writable(out_dir / "summary.csv", args.force)
    median = _writable(out_dir / "median_curve.csv", args.force)
    traj_dir = out_dir / "trajectories"
    paths = [_writable(traj_dir / f"run_{i:04d}.csv", args.force) for i in ids]

    runs = run_targets(_start_gears(spec, args), targets, ckpt, spec, opts, args.jobs)
    for run, path in zip(runs, paths):
        write_trajectory_csv(run, path)
    write_summary_csv(runs, summary)
    if runs:
        length = max(r.history.shape[0] for r in runs)
        write_curve_csv({
            "median_pos_err_mm": np.median(error_matrix(runs, length, 0), axis=0),
            "median_rot_err_deg": np.median(error_matrix(runs, length, 1), axis=0),
        }, median)
        final = np.array([r.final_pos_err for r in runs])
        final_rot = np.array([r.final_rot_err for r in runs])
        print(f"{len(runs)} runs; median final error {np.median(final):.3f} mm / {np.median(final_rot):.3f} deg")
    else:
        write_curve_csv({}, median)
        print("no valid targets")
    return EXIT_OK


# --- optimizer comparison -----------------------------------------------------

def cmd_compare(args) -> int:
    from .inference import compare_optimizers, error_matrix, sample_targets
    from .training import load_checkpoint

    cfg = _config(args)
    ckpts = [load_checkpoint(p) for p in args.checkpoint]
    if len(ckpts) != 5:
        print(f"warning: {len(ckpts)} checkpoint(s) given; the reference comparison uses 5", file=sys.stderr)
    spec = ckpts[0].spec
    opts = _infer_options(cfg, args)
    runs_total = args.runs if args.runs is not None else cfg.infer.runs_per_optimizer
    per_model = max(1, runs_total // len(ckpts))
    targets, _ = sample_targets(spec, np.random.default_rng(cfg.seed), per_model, cfg.infer.gamma1, cfg.infer.gamma2)
    out = _writable(args.out, args.force)
    start = _start_gears(spec, args)
    optimizers = args.optimizers.split(",")

    def runner(start_, targets_, ck, spec_, o):
        return run_targets(start_, targets_, ck, spec_, o, args.jobs)

    results = compare_optimizers(ckpts, spec, targets, start, optimizers, opts, run=runner)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["optimizer", "iteration", "median_mm", "q25_mm", "q75_mm"])
        for name, runs in results.items():
            m = error_matrix(runs, opts.max_iters)
            q25, med, q75 = np.quantile(m, [0.25, 0.5, 0.75], axis=0)
            for i in range(m.shape[1]):
                w.writerow([name, i, repr(float(med[i])), repr(float(q25[i])), repr(float(q75[i]))])
    for name, runs in results.items():
        final = np.median([r.final_pos_err for r in runs])
        print(f"{name:12s} median final error {final:.3f} mm over {len(runs)} runs")
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trunksnn", description="Spiking forward models and motor inference for trunk arms.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key=value experiment config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    g = sub.add_parser("generate", help="sample arm configurations into a dataset file")
    common(g)
    g.add_argument("--variant", choices=["three", "four"])
    g.add_argument("--joints", type=int)
    g.add_argument("--samples", type=int)
    g.add_argument("--role", choices=["train", "test"], default="train")
    g.add_argument("--csv", help="also export an end-effector CSV")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a forward model")
    common(t)
    t.add_argument("--data", required=True, help="training dataset")
    t.add_argument("--test", help="test dataset evaluated after each epoch")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics CSV (default: <out>.csv)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--checkpoint-every", type=int, help="save every N updates")
    t.add_argument("--max-updates", type=int, help="stop after N updates in total")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="report test-set errors of a checkpoint")
    common(e, seed=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_evaluate)

    def infer_flags(sp, many=False):
        sp.add_argument("--checkpoint", required=True, action="append" if many else "store",
                        help="trained checkpoint" + (" (repeat for several models)" if many else ""))
        sp.add_argument("--no-correction", action="store_true", help="disable target correction")
        sp.add_argument("--max-iters", type=int)
        sp.add_argument("--eta0", type=float)
        sp.add_argument("--start", help="comma-separated start gears (default: neutral arm)")
        sp.add_argument("--jobs", type=int, default=1)

    i = sub.add_parser("infer", help="drive the arm to targets by backprojected gradients")
    common(i)
    infer_flags(i)
    i.add_argument("--targets", type=int, help="number of random reachable targets")
    i.add_argument("--targets-file", help="CSV of x_mm,y_mm,z_mm,qw,qx,qy,qz")
    i.add_argument("--optimizer")
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("compare-optimizers", help="median error curves per optimizer")
    common(c)
    infer_flags(c, many=True)
    c.add_argument("--runs", type=int, help="runs per optimizer, split over the checkpoints")
    c.add_argument("--optimizers", default="adam,amsgrad,sd-momentum,sd-amsgrad")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecMismatchError, IncompatibleCheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergedError, GradientExplosionError, NonFiniteGradientError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
