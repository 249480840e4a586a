"""Command-line pipeline: checkerboard, sdot, pairs, train, sample, eval.

Every subcommand resolves a :class:`~sdotflow.config.RunConfig` from the
defaults, an optional ``--config`` file, ``--set key=value`` overrides and
its own flags (in that order), writes the resolved config to
``<out>/<command>.config`` and then its outputs. Exit codes: 0 success,
2 invalid input or failed threshold, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import KEYS, RunConfig, describe_keys
from .data import density_grid, load_dataset, read_points, sample_checkerboard, write_pgm, write_points
from .errors import NumericalError, ValidationError
from .flow import Coupling, train, write_loss_csv
from .nn import read_checkpoint, write_checkpoint
from .pairing import generate_pairs, read_pairs, rebalance_pairs, shuffle_pairs, write_pairs
from .rng import mix_seed, noise_from_seeds
from .sampler import (TrajectoryLog, empirical_w2, integrate, read_trajectories_csv, straightness_per_trajectory,
                      write_summary_csv, write_trajectories_csv)
from .sdot import Dataset, NoisePrior, read_duals, solve_dual, write_duals, write_metrics_csv

log = logging.getLogger("sdotflow")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
TIME_SLICES = 10


class ThresholdFailure(Exception):
    pass


# --- path helpers -----------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _path(cfg: RunConfig, key: str, default_name: str) -> Path:
    return Path(cfg[key]) if cfg[key] else Path(cfg["out"]) / default_name


def _dataset(cfg: RunConfig) -> Dataset:
    if not cfg["data"]:
        raise ValidationError("no data file given (use --data or the 'data' key)")
    return load_dataset(cfg["data"])


def duals_name(class_id: int) -> str:
    return f"duals_c{class_id}.bin"


def default_class_mix(dataset: Dataset, count: int) -> dict[int, int]:
    """Split ``count`` over classes in proportion to their total weight.

    Largest remainders get the leftover pairs (smaller class id first on ties).
    """
    classes = dataset.classes()
    if len(classes) == 1:
        return {classes[0]: count}
    share = np.array([dataset.weights[dataset.class_indices(c)].sum() for c in classes]) * count
    base = np.floor(share).astype(np.int64)
    order = np.argsort(-(share - base), kind="stable")
    base[order[: count - int(base.sum())]] += 1
    return {c: int(n) for c, n in zip(classes, base)}


# --- commands -------------------------------------------------------------------


def cmd_checkerboard(cfg: RunConfig) -> int:
    """Sample the fixed checkerboard training set into <out>/points.txt."""
    n = cfg["checkerboard.n"]
    if n < 1:
        raise ValidationError("checkerboard.n must be >= 1")
    path = _out(cfg) / "points.txt"
    write_points(path, sample_checkerboard(n, cfg["checkerboard.seed"]))
    log.info("wrote %d points to %s", n, path)
    return EXIT_OK


def cmd_sdot(cfg: RunConfig) -> int:
    """Solve the dual weights of every class; fails when mre_est stays above threshold."""
    dataset = _dataset(cfg)
    out = _out(cfg)
    sdot_cfg = cfg.sdot_config()
    prior = NoisePrior(dataset.dim)
    failed = []
    for c in dataset.classes():
        sub = dataset.restrict(c) if dataset.class_ids is not None else dataset
        result = solve_dual(sub, prior, sdot_cfg)
        write_duals(result.duals, out / duals_name(c))
        write_metrics_csv(result.history, out / f"sdot_metrics_c{c}.csv")
        final = result.history[-1].mre_est
        log.info("class %d: %d points, final mre_est %.4g", c, sub.size, final)
        if not final < cfg["sdot.threshold"]:
            failed.append((c, final))
    if failed:
        raise ThresholdFailure("mre_est at or above threshold %r for class(es) %s" % (
            cfg["sdot.threshold"], ", ".join(f"{c} ({v:.4g})" for c, v in failed)))
    return EXIT_OK


def cmd_pairs(cfg: RunConfig) -> int:
    """Map seeded noise to data indices with the stored duals, optionally rebalanced."""
    dataset = _dataset(cfg)
    out = _out(cfg)
    needed = cfg["train.steps"] * cfg["train.batch_size"]
    count = cfg["pairs.count"] or needed
    if count != needed:
        log.warning("M = %d pairs but K*B = %d*%d = %d for the configured training run",
                    count, cfg["train.steps"], cfg["train.batch_size"], needed)
    else:
        log.info("M = K*B = %d*%d = %d", cfg["train.steps"], cfg["train.batch_size"], count)
    mix = dict(cfg["pairs.class_mix"]) or default_class_mix(dataset, count)
    duals_dir = Path(cfg["duals"]) if cfg["duals"] else out
    duals = {c: read_duals(duals_dir / duals_name(c)) for c in sorted(mix) if mix[c] > 0}
    table = generate_pairs(dataset, duals, NoisePrior(dataset.dim), count, cfg["pairs.seed"], mix)
    if cfg["pairs.rebalance"]:
        table, reports = rebalance_pairs(table, dataset)
        with open(out / "rebalance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "pairs", "changed"])
            for c, rep in sorted(reports.items()):
                w.writerow([c, rep.total, rep.changed])
                log.info("class %d: rebalance changed %d of %d", c, rep.changed, rep.total)
        if cfg["pairs.shuffle"]:
            table = shuffle_pairs(table, cfg["pairs.seed"])
    path = _path(cfg, "pairs", "pairs.bin")
    write_pairs(table, path, dataset.size)
    log.info("wrote %d pairs to %s", count, path)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    """Train a velocity network; writes a checkpoint and the loss CSV."""
    dataset = _dataset(cfg)
    out = _out(cfg)
    tcfg = cfg.train_config()
    pairs = None
    if tcfg.coupling is Coupling.ALIGNED:
        pairs, n = read_pairs(_path(cfg, "pairs", "pairs.bin"))
        if n != dataset.size:
            raise ValidationError(f"pair file was built for {n} points, dataset has {dataset.size}")
    result = train(dataset, tcfg, pairs)
    write_checkpoint(result.params, _path(cfg, "model", "model.ckpt"))
    write_loss_csv(result.history, out / "loss.csv")
    if result.history:
        log.info("final loss %.5g (ema %.5g)", result.history[-1][1], result.history[-1][2])
    return EXIT_OK


def cmd_sample(cfg: RunConfig) -> int:
    """Integrate noise from a seed range to samples, trajectories and a summary."""
    out = _out(cfg)
    params = read_checkpoint(_path(cfg, "model", "model.ckpt"))
    n, first = cfg["sample.count"], cfg["sample.first"]
    if n < 1 or first < 0:
        raise ValidationError("sample.count must be >= 1 and sample.first >= 0")
    seeds = mix_seed(cfg["sample.seed"], np.arange(first, first + n, dtype=np.uint64))
    x0 = noise_from_seeds(seeds, params.dim)
    traj = integrate(params, x0, cfg["sample.scheme"], cfg["sample.steps"], cfg["sample.policy"])
    write_points(_path(cfg, "samples", "samples.txt"), traj.final)
    keep = min(max(cfg["sample.trajectories"], 0), n)
    if keep:
        sub = TrajectoryLog(traj.times, traj.states[:, :keep], traj.nfe)
        write_trajectories_csv(sub, _path(cfg, "trajectories", "trajectories.csv"), first_id=first)
    per_traj = straightness_per_trajectory(traj)
    write_summary_csv({
        "samples": n,
        "steps": cfg["sample.steps"],
        "scheme": cfg["sample.scheme"],
        "policy": cfg["sample.policy"],
        "nfe_per_sample": traj.nfe,
        "straightness": float(per_traj.mean()),
    }, out / "sample_summary.csv")
    log.info("%d samples, nfe %d per sample", n, traj.nfe)
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    """W2 against a reference set, straightness CSV and density rasters."""
    out = _out(cfg)
    samples, _ = read_points(_path(cfg, "samples", "samples.txt"))
    ref_path = cfg["reference"] or cfg["data"]
    if not ref_path:
        raise ValidationError("no reference file given (use --reference or --data)")
    reference, _ = read_points(ref_path)
    n = min(samples.shape[0], reference.shape[0])
    metrics = {"samples": n, "w2": empirical_w2(samples[:n], reference[:n])}
    write_pgm(out / "density.pgm", density_grid(samples))

    traj_path = _path(cfg, "trajectories", "trajectories.csv")
    if cfg["trajectories"] or traj_path.exists():
        traj = read_trajectories_csv(traj_path)
        per = straightness_per_trajectory(traj)
        with open(out / "straightness.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "straightness"])
            for j, v in enumerate(per):
                w.writerow([j, repr(float(v))])
        metrics["straightness_mean"] = float(per.mean())
        metrics["straightness_median"] = float(np.median(per))
        for k, t in enumerate(np.linspace(0.0, 1.0, TIME_SLICES)):
            write_pgm(out / f"density_t{k}.pgm", density_grid(state_at(traj, t)))
    write_summary_csv(metrics, out / "eval_summary.csv")
    log.info("W2 %.5g over %d samples", metrics["w2"], n)
    return EXIT_OK


def state_at(traj, t: float) -> np.ndarray:
    """Trajectory states at time ``t``, linear between logged times."""
    k = int(np.clip(np.searchsorted(traj.times, t, side="right") - 1, 0, traj.times.size - 2))
    t0, t1 = traj.times[k], traj.times[k + 1]
    w = (t - t0) / (t1 - t0)
    return (1.0 - w) * traj.states[k] + w * traj.states[k + 1]


COMMANDS = {
    "checkerboard": cmd_checkerboard,
    "sdot": cmd_sdot,
    "pairs": cmd_pairs,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}

# long flag -> config key, per command
FLAGS = {
    "checkerboard": {"--n": "checkerboard.n", "--seed": "checkerboard.seed"},
    "sdot": {"--data": "data", "--seed": "sdot.seed", "--threshold": "sdot.threshold"},
    "pairs": {"--data": "data", "--duals": "duals", "--pairs": "pairs", "--count": "pairs.count",
              "--seed": "pairs.seed", "--class-mix": "pairs.class_mix"},
    "train": {"--data": "data", "--pairs": "pairs", "--model": "model", "--steps": "train.steps",
              "--seed": "train.seed", "--coupling": "train.coupling", "--target": "train.target"},
    "sample": {"--model": "model", "--samples": "samples", "--trajectories": "trajectories",
               "--count": "sample.count", "--steps": "sample.steps", "--seed": "sample.seed",
               "--scheme": "sample.scheme", "--policy": "sample.policy"},
    "eval": {"--data": "data", "--samples": "samples", "--reference": "reference",
             "--trajectories": "trajectories"},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdotflow", allow_abbrev=False,
        description="Semi-discrete OT noise-data alignment for flow matching.",
        epilog="config keys (key = default):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, allow_abbrev=False, help=(COMMANDS[name].__doc__ or "").strip())
        p.add_argument("--config", help="key = value file applied over the defaults")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", dest="out", default=None, help="sets out")
        for flag, key in FLAGS[name].items():
            p.add_argument(flag, dest=key, default=None, help=f"sets {key}")
        if name == "pairs":
            p.add_argument("--rebalance", dest="pairs.rebalance", action="store_const", const="true",
                           default=None, help="sets pairs.rebalance = true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then ``--config``, then ``--set``, then dedicated flags."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg = cfg.with_text(args.set)
    return cfg.with_text(f"{k}={v}" for k, v in vars(args).items() if k in KEYS and v is not None)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        cfg.write(_out(cfg) / f"{args.command}.config")
        return COMMANDS[args.command](cfg)
    except ThresholdFailure as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
