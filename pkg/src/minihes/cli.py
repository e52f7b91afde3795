"""
cli.py — ``minihes`` command line: split, train, grid, verify, bench.

Every command that produces files also writes ``manifest.json`` next to them
with the resolved configuration, the top-level seed and its derived
sub-seeds, dataset checksums and the artifact paths.

Configuration precedence: flags > ``--config`` JSON file > MINIHES_THREADS
(threads only) > built-in defaults.

Exit status: 0 on success, 2 on configuration or usage errors, 1 on any other
failure (including a failed verification).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from minihes import __version__
from minihes.bench import bench_threads, write_speedup_csv
from minihes.configuration import SEED_PURPOSES, RuntimeSettings, configure_logging, derive_seed
from minihes.data import (
    HdiDataset,
    checksum,
    file_checksum,
    read_aligned,
    read_ratings,
    split_dataset,
    synthetic_low_rank,
    write_ratings,
)
from minihes.errors import ConfigError, MiniHesError, OracleCapExceeded
from minihes.factors import FactorState, save_factors
from minihes.schemas import OptimizerConfig, RunManifest, TrainReport
from minihes.trainer import DEFAULT_LAMBDA_GRID, grid_search, train
from minihes.verification import run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

# flag dest -> OptimizerConfig field
CONFIG_FLAGS = {
    "optimizer": "optimizer",
    "f": "f",
    "lam": "lam",
    "gamma": "gamma",
    "tau": "tau",
    "cg_max_iters": "cg_max_iters",
    "lr": "lr",
    "beta1": "beta1",
    "beta2": "beta2",
    "epsilon": "epsilon",
    "max_epochs": "max_epochs",
    "patience": "patience",
    "seed": "seed",
    "threads": "threads",
    "metric": "eval_metric",
    "adaptive_gamma": "adaptive_gamma",
    "warm_start": "warm_start",
    "balanced_partition": "balanced_partition",
    "block_order": "block_order",
}


# ── Configuration ─────────────────────────────────────────────────────────────

def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")
    return raw


def resolve_config(args: argparse.Namespace, **overrides: Any) -> OptimizerConfig:
    """Merge defaults, MINIHES_THREADS, the config file and explicit flags."""
    merged: dict[str, Any] = {"threads": RuntimeSettings().threads}
    merged.update(load_config_file(getattr(args, "config", None)))
    for dest, field_name in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            merged[field_name] = value
    merged.update(overrides)
    return OptimizerConfig.model_validate(merged)


def _derived_seeds(seed: int) -> dict[str, int]:
    return {purpose: derive_seed(seed, purpose) for purpose in SEED_PURPOSES}


def _write_manifest(out: Path, manifest: RunManifest) -> None:
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ── Report files ──────────────────────────────────────────────────────────────

TRACE_COLUMNS = ["epoch", "train_loss", "val_rmse", "val_mae", "val_metric", "seconds", "gamma", "cg_mean_iters"]


def write_trace_csv(report: TrainReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for record in report.epochs:
            writer.writerow(record.model_dump())


def _write_run(out: Path, report: TrainReport, state: FactorState, seed: int) -> dict[str, str]:
    paths = {
        "report": out / "report.json",
        "trace": out / "trace.csv",
        "factors": out / "factors.bin",
    }
    paths["report"].write_text(report.model_dump_json(indent=2), encoding="utf-8")
    write_trace_csv(report, paths["trace"])
    save_factors(state, paths["factors"], seed)
    return {name: str(p) for name, p in paths.items()}


def _load_splits(args: argparse.Namespace) -> tuple[HdiDataset, HdiDataset, Optional[HdiDataset]]:
    paths = [args.train, args.val] + ([args.test] if args.test else [])
    datasets = read_aligned(paths, args.delimiter)
    test = datasets[2] if args.test else None
    return datasets[0], datasets[1], test


def _dataset_checksums(args: argparse.Namespace) -> dict[str, str]:
    sums = {"train": file_checksum(args.train), "val": file_checksum(args.val)}
    if args.test:
        sums["test"] = file_checksum(args.test)
    return sums


# ── Commands ──────────────────────────────────────────────────────────────────

def cmd_split(args: argparse.Namespace) -> int:
    data = read_ratings(args.input, args.delimiter)
    split_seed = derive_seed(args.seed, "split")
    parts = split_dataset(data, args.ratios, seed=split_seed, stratify=args.stratify)

    out = _out_dir(args.out)
    artifacts = {}
    for name, part in zip(("train", "val", "test"), parts):
        path = out / f"{name}.tsv"
        write_ratings(part, path)
        artifacts[name] = str(path)
        print(f"{name}: {len(part)} entries -> {path}")

    _write_manifest(
        out,
        RunManifest(
            command="split",
            tool_version=__version__,
            config={"ratios": list(args.ratios), "stratify": args.stratify, "delimiter": args.delimiter},
            seed=args.seed,
            derived_seeds={"split": split_seed},
            dataset_checksums={"input": file_checksum(args.input), **{n: checksum(p) for n, p in zip(("train", "val", "test"), parts)}},
            artifacts=artifacts,
        ),
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    train_set, val_set, test_set = _load_splits(args)
    state, report = train(train_set, val_set, config, test=test_set)

    out = _out_dir(args.out)
    artifacts = _write_run(out, report, state, config.seed)
    _write_manifest(
        out,
        RunManifest(
            command="train",
            tool_version=__version__,
            config=config.model_dump(mode="json"),
            seed=config.seed,
            derived_seeds=_derived_seeds(config.seed),
            dataset_checksums=_dataset_checksums(args),
            artifacts=artifacts,
        ),
    )

    print(
        f"{config.optimizer}: {report.epochs_run} epochs, best epoch {report.best_epoch}, "
        f"val {config.eval_metric}={report.best_validation:.6f}"
    )
    if report.test_rmse is not None:
        print(f"test RMSE={report.test_rmse:.6f} MAE={report.test_mae:.6f}")
    return EXIT_OK


GRID_COLUMNS = ["lambda", "tau", "best_epoch", "best_validation", "test_rmse", "test_mae", "epochs_run", "seconds"]


def cmd_grid(args: argparse.Namespace) -> int:
    """Train once per (λ, τ) pair and keep the run with the best validation metric."""
    base = resolve_config(args)
    lambdas = args.lambdas or list(DEFAULT_LAMBDA_GRID)
    train_set, val_set, test_set = _load_splits(args)

    out = _out_dir(args.out)
    state, report, rows = grid_search(train_set, val_set, base, lambdas, args.taus, test=test_set)
    taus = list(dict.fromkeys(row["tau"] for row in rows))

    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    artifacts = _write_run(out, report, state, base.seed)
    artifacts["grid"] = str(out / "grid.csv")
    _write_manifest(
        out,
        RunManifest(
            command="grid",
            tool_version=__version__,
            config={**report.config.model_dump(mode="json"), "lambda_grid": lambdas, "tau_grid": taus},
            seed=base.seed,
            derived_seeds=_derived_seeds(base.seed),
            dataset_checksums=_dataset_checksums(args),
            artifacts=artifacts,
        ),
    )
    print(
        f"best lambda={report.config.lam:g} tau={report.config.tau:g}: "
        f"val {base.eval_metric}={report.best_validation:.6f}"
    )
    if report.test_rmse is not None:
        print(f"test RMSE={report.test_rmse:.6f} MAE={report.test_mae:.6f}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        report = run_verification(
            num_users=args.users,
            num_items=args.items,
            f=args.f,
            instances=args.instances,
            seed=args.seed,
            samples=args.samples,
            fault=args.inject_fault,
            dominance=args.dominance,
        )
    except OracleCapExceeded as exc:
        raise ConfigError(str(exc)) from exc

    for check in report.checks:
        status = "ok  " if check.passed else "FAIL"
        print(f"{status} {check.name:<20} max error {check.max_error:.3e}  (tolerance {check.tolerance:.0e})")
    for density, ratio in report.dominance:
        print(f"density {density:.3f}  offdiag/diag {ratio:.4f}")

    if args.out:
        out = _out_dir(args.out)
        (out / "verification.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        _write_manifest(
            out,
            RunManifest(
                command="verify",
                tool_version=__version__,
                config={"users": args.users, "items": args.items, "f": args.f,
                        "instances": args.instances, "samples": args.samples},
                seed=args.seed,
                derived_seeds={"verify": derive_seed(args.seed, "verify")},
                artifacts={"verification": str(out / "verification.json")},
            ),
        )

    if not report.passed:
        failed = [c.name for c in report.checks if not c.passed]
        print(f"verification failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if args.input:
        dataset = read_ratings(args.input, args.delimiter)
        name = args.name or Path(args.input).stem
        checksums = {"input": file_checksum(args.input)}
    elif args.synthetic:
        side = max(1, math.ceil(math.sqrt(args.synthetic / args.density)))
        dataset = synthetic_low_rank(
            side, side, rank=3, density=args.synthetic / (side * side),
            seed=derive_seed(config.seed, "synthetic"),
        )
        name = args.name or f"synthetic-{len(dataset)}"
        checksums = {"synthetic": checksum(dataset)}
    else:
        raise ConfigError("bench needs --input or --synthetic")

    report = bench_threads(
        dataset, config, args.thread_counts, repeats=args.repeats, epochs=args.epochs, name=name
    )
    out = _out_dir(args.out)
    write_speedup_csv(report, out / "speedup.csv")
    (out / "speedup.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    _write_manifest(
        out,
        RunManifest(
            command="bench",
            tool_version=__version__,
            config={**config.model_dump(mode="json"), "thread_counts": args.thread_counts,
                    "repeats": args.repeats, "epochs": args.epochs},
            seed=config.seed,
            derived_seeds=_derived_seeds(config.seed),
            dataset_checksums=checksums,
            artifacts={"csv": str(out / "speedup.csv"), "json": str(out / "speedup.json")},
        ),
    )
    print("Dataset,Thread,Time,Speedup")
    for row in report.rows:
        print(f"{name},{row.threads},{row.median_seconds:.3f} ± {row.std_seconds:.3f},{row.speedup:.2f}")
    return EXIT_OK


# ── Parser ────────────────────────────────────────────────────────────────────

def _add_optimizer_flags(parser: argparse.ArgumentParser, with_threads: bool = True) -> None:
    g = parser.add_argument_group("optimizer")
    g.add_argument("--config", help="JSON file with OptimizerConfig fields")
    g.add_argument("--optimizer", help="mini-hes | sgd | adam | yogi")
    g.add_argument("--f", type=int, help="latent dimension (default 20)")
    g.add_argument("--lambda", dest="lam", type=float, help="Tikhonov constant (default 0)")
    g.add_argument("--gamma", type=float, help="damping added to every block (default 1)")
    g.add_argument("--tau", type=float, help="CG relative residual tolerance (default 0.1)")
    g.add_argument("--cg-max-iters", type=int, help="CG iteration cap per block (default f)")
    g.add_argument("--lr", type=float, help="first-order learning rate (default 0.01)")
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--max-epochs", type=int, help="epoch cap (default 500)")
    g.add_argument("--patience", type=int, help="early-stopping patience (default 10)")
    g.add_argument("--seed", type=int, help="top-level seed (default 0)")
    if with_threads:
        g.add_argument("--threads", type=int, help="worker threads (default MINIHES_THREADS or 1)")
    g.add_argument("--metric", choices=["rmse", "mae"], help="early-stopping metric (default rmse)")
    g.add_argument("--adaptive-gamma", action="store_true", default=None)
    g.add_argument("--warm-start", action="store_true", default=None)
    g.add_argument("--balanced-partition", action="store_true", default=None)
    g.add_argument("--block-order", choices=["alternating", "joint"], default=None)


def _add_split_paths(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train", required=True)
    parser.add_argument("--val", required=True)
    parser.add_argument("--test")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--delimiter", default="auto", help="auto | comma | tab | whitespace | ::")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minihes",
        description="Mini-Hes latent factor analysis: split, train, grid, verify, bench.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="seeded train/validation/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--ratios", type=_float_list, default=[0.6, 0.2, 0.2], help="default 0.6,0.2,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stratify", action="store_true", help="split each user's entries separately")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--delimiter", default="auto", help="auto | comma | tab | whitespace | ::")
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", help="train one model and write its report")
    _add_split_paths(p)
    _add_optimizer_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("grid", help="train over a lambda (and tau) grid, keep the best")
    _add_split_paths(p)
    _add_optimizer_flags(p)
    p.add_argument("--lambdas", type=_float_list, help="default 0,0.01,...,0.1")
    p.add_argument("--taus", type=_float_list, help="e.g. 0.1,1 (Mini-Hes only)")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("verify", help="run the dense-oracle checks on random tiny instances")
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--items", type=int, default=6)
    p.add_argument("--f", type=int, default=3)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--samples", type=int, default=100, help="operator-property samples (default 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dominance", action="store_true", help="also report the Hessian off-diagonal mass trend")
    p.add_argument("--out", help="write verification.json and a manifest here")
    p.add_argument("--inject-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("bench", help="thread-scaling benchmark")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="rating file")
    src.add_argument("--synthetic", type=int, help="generate a synthetic dataset with this many entries")
    p.add_argument("--density", type=float, default=0.01, help="synthetic density (default 0.01)")
    p.add_argument("--name", help="dataset label in the report")
    p.add_argument("--threads", dest="thread_counts", type=_int_list, default=[2, 4, 8], help="default 2,4,8")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--delimiter", default="auto")
    _add_optimizer_flags(p, with_threads=False)
    p.set_defaults(handler=cmd_bench)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else None)
    try:
        return args.handler(args)
    except (ConfigError, ValidationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MiniHesError, OSError, ValueError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
