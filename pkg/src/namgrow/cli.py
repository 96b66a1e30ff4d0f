"""Command-line driver binding the pipeline stages to reproducible runs.

Five commands cover the whole workflow:

    namgrow train-base    --config run.ini          # train a network
    namgrow grow          --config run.ini --checkpoint base.json
    namgrow transfer      --config run.ini --checkpoint base.json
    namgrow eval          --checkpoint net.json --dataset mnist --data-dir d/
    namgrow cluster-cache --checkpoint base.json    # precompute clustering

`cluster-cache` saves the mean-shift cluster summaries of a checkpoint's
branches so repeated grow/transfer runs can skip the clustering stage via
`--cluster-cache`; a cached run is byte-identical to an uncached one.

Every run reads one INI config (flags override individual keys), writes its
fully-resolved config and a run_meta.json with input SHA-256 hashes next to
its outputs, and is deterministic given (config, seed, input files).

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 internal invariant violation.
"""

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("namgrow.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

DEFAULT_CONFIG = {
    "run": {"seed": "0", "out_dir": "runs/run", "threads": "0"},
    "data": {"dataset": "cifar10", "data_dir": "data"},
    "model": {"grid": "base"},
    "train": {"epochs": "40", "batch_size": "128", "learning_rate": "1e-3"},
    "growth": {
        "selection_size": "5000",
        "max_per_iteration": "64",
        "tuning_epochs": "2",
        "mask_learning_rate": "1e-2",
        "mask_batch_size": "128",
        "keep_fraction": "0.8",
        "top_fraction": "0.2",
        "reference_per_class": "100",
        "max_iterations": "-1",
    },
    "cluster": {
        "n_samples": "10000",
        "top_fraction": "0.2",
        "neighbor_distance": "0.5",
        "min_shift_distance": "1e-3",
        "bandwidth": "0.3",
        "max_shift_iterations": "200",
    },
}

# (argparse attribute, config section, config key)
_OVERRIDES = [
    ("seed", "run", "seed"),
    ("out_dir", "run", "out_dir"),
    ("threads", "run", "threads"),
    ("data_dir", "data", "data_dir"),
    ("dataset", "data", "dataset"),
    ("grid", "model", "grid"),
    ("epochs", "train", "epochs"),
    ("max_iterations", "growth", "max_iterations"),
]


class ConfigError(Exception):
    """Bad config file or option values — a usage error, not a data error."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(args) -> configparser.ConfigParser:
    """Defaults <- config file <- command-line flags, in that order."""
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg.read(path)
    for attr, section, key in _OVERRIDES:
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = str(value)
    return cfg


def _set_thread_limit(cfg) -> None:
    """Cap BLAS/OpenMP threads; must run before numpy is first imported."""
    try:
        threads = cfg["run"].getint("threads")
    except ValueError as exc:
        raise ConfigError(f"threads: {exc}") from exc
    if threads < 0:
        raise ConfigError("threads must be >= 0 (0 = all available cores)")
    if threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)


def _growth_config(cfg, mode):
    from .clustering import ClusterConfig
    from .growth import GrowthConfig

    g, c = cfg["growth"], cfg["cluster"]
    try:
        cluster = ClusterConfig(
            n_samples=c.getint("n_samples"),
            top_fraction=c.getfloat("top_fraction"),
            neighbor_distance=c.getfloat("neighbor_distance"),
            min_shift_distance=c.getfloat("min_shift_distance"),
            bandwidth=c.getfloat("bandwidth"),
            max_shift_iterations=c.getint("max_shift_iterations"),
        )
        return GrowthConfig(
            mode=mode,
            selection_size=g.getint("selection_size"),
            max_per_iteration=g.getint("max_per_iteration"),
            tuning_epochs=g.getint("tuning_epochs"),
            mask_learning_rate=g.getfloat("mask_learning_rate"),
            mask_batch_size=g.getint("mask_batch_size"),
            keep_fraction=g.getfloat("keep_fraction"),
            top_fraction=g.getfloat("top_fraction"),
            reference_per_class=g.getint("reference_per_class"),
            seed=cfg["run"].getint("seed"),
            cluster=cluster,
        )
    except ValueError as exc:
        raise ConfigError(f"growth/cluster config: {exc}") from exc


def _load_split(cfg, split):
    from . import data_io

    name = cfg["data"]["dataset"].strip().lower()
    data_dir = cfg["data"]["data_dir"]
    loaders = {"cifar10": data_io.load_cifar10, "mnist": data_io.load_mnist}
    if name not in loaders:
        raise ConfigError(f"unknown dataset {name!r} (expected cifar10 or mnist)")
    dataset = loaders[name](data_dir, split)
    log.info("loaded %s %s split: %d samples of shape %s", name, split,
             dataset.n, dataset.shape)
    return dataset


def _data_hashes(cfg) -> dict:
    from .data_io import sha256_file

    root = Path(cfg["data"]["data_dir"])
    if not root.is_dir():
        raise FileNotFoundError(f"data directory not found: {root}")
    return {str(p.relative_to(root)): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file()}


def _input_hashes(cfg, args) -> dict:
    from .data_io import sha256_file

    hashes = {"data": _data_hashes(cfg)}
    if getattr(args, "config", None):
        hashes["config"] = sha256_file(args.config)
    if getattr(args, "checkpoint", None):
        hashes["checkpoint"] = sha256_file(args.checkpoint)
    if getattr(args, "cluster_cache", None):
        hashes["cluster_cache"] = sha256_file(args.cluster_cache)
    return hashes


def _load_cluster_cache(path):
    from .clustering import clusters_from_json

    try:
        return clusters_from_json(Path(path).read_text())
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed cluster cache {path}: {exc}") from exc


def _prepare_out_dir(cfg, args) -> Path:
    out_dir = Path(cfg["run"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.ini", "w") as fh:
        fh.write(f"# resolved configuration for: namgrow {args.command}\n")
        cfg.write(fh)
    return out_dir


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _json_num(x):
    import math

    return None if x is None or math.isnan(x) else x


def _check_geometry(net, dataset) -> None:
    if tuple(net.input_shape) != tuple(dataset.shape):
        raise ValueError(f"checkpoint expects input shape {net.input_shape}, "
                         f"dataset has {dataset.shape}")
    if net.n_classes != dataset.n_classes:
        raise ValueError(f"checkpoint has {net.n_classes} classes, "
                         f"dataset has {dataset.n_classes}")


def _write_branch_series(path: Path, branch_points) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "branches", "accuracy", "loss"])
        for bp in branch_points:
            writer.writerow([bp.iteration, bp.branch_count,
                             bp.accuracy, bp.loss])


def _write_candidates(path: Path, candidate_records) -> None:
    with open(path, "w") as fh:
        for rec in candidate_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class _IterationWriter:
    """Streams the growth log and the Fig-style metric CSV during a run."""

    def __init__(self, out_dir: Path):
        self.log_file = open(out_dir / "growth_log.jsonl", "w")
        self.csv_file = open(out_dir / "metrics.csv", "w", newline="")
        self.csv = csv.writer(self.csv_file)
        self.csv.writerow(["iteration", "branches", "accuracy", "loss"])

    def __call__(self, record):
        self.log_file.write(record.to_json_line() + "\n")
        self.log_file.flush()
        self.csv.writerow([record.iteration, record.branch_count,
                           record.test_accuracy, record.test_loss])
        self.csv_file.flush()

    def close(self):
        self.log_file.close()
        self.csv_file.close()


def cmd_train_base(args, cfg) -> int:
    from .checkpoint import save_checkpoint
    from .nam_model import (build_base_network, build_full_perception_network,
                            evaluate, parameter_count)
    from .nn_core import optimizer_step_count, reset_optimizer_step_count
    from .training import TrainConfig, train_network

    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    grid = cfg["model"]["grid"].strip().lower()
    builders = {"base": build_base_network,
                "full": build_full_perception_network}
    if grid not in builders:
        raise ConfigError(f"unknown grid {grid!r} (expected base or full)")
    seed = cfg["run"].getint("seed")
    name = cfg["data"]["dataset"].strip().lower()
    net = builders[grid](train.shape, train.n_classes, seed,
                         tag=f"{name}-{grid}")
    try:
        train_config = TrainConfig(epochs=cfg["train"].getint("epochs"),
                                   batch_size=cfg["train"].getint("batch_size"),
                                   learning_rate=cfg["train"].getfloat(
                                       "learning_rate"),
                                   seed=seed)
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from exc
    log.info("training %d branches (%d parameters) for %d epochs",
             net.n_branches, parameter_count(net), train_config.epochs)
    out_dir = _prepare_out_dir(cfg, args)
    reset_optimizer_step_count()
    with open(out_dir / "epochs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "eval_accuracy", "eval_loss"])
        fh.flush()

        def on_epoch(metrics):
            writer.writerow([metrics.epoch, metrics.train_loss,
                             metrics.eval_accuracy, metrics.eval_loss])
            fh.flush()
            log.info("epoch %d: train loss %.4f, test accuracy %.4f",
                     metrics.epoch, metrics.train_loss, metrics.eval_accuracy)

        train_network(net, train, train_config, eval_dataset=test,
                      on_epoch=on_epoch)
    save_checkpoint(net, out_dir / "checkpoint.json")
    accuracy, loss = evaluate(net, test)
    _write_json(out_dir / "run_meta.json", {
        "command": "train-base",
        "dataset": name,
        "grid": grid,
        "seed": seed,
        "input_hashes": _input_hashes(cfg, args),
        "optimizer_steps": optimizer_step_count(),
        "branch_count": net.n_branches,
        "parameter_count": parameter_count(net),
        "test_accuracy": accuracy,
        "test_loss": loss,
    })
    log.info("done: test accuracy %.4f, loss %.4f -> %s", accuracy, loss,
             out_dir)
    return EXIT_OK


def cmd_grow(args, cfg) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .growth import run_growth
    from .nam_model import parameter_count
    from .nn_core import optimizer_step_count, reset_optimizer_step_count

    net = load_checkpoint(args.checkpoint)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    _check_geometry(net, train)
    growth_config = _growth_config(cfg, "tuning")
    max_iterations = cfg["growth"].getint("max_iterations")
    if max_iterations < 0:
        max_iterations = None
    cluster_table = (_load_cluster_cache(args.cluster_cache)
                     if args.cluster_cache else None)
    out_dir = _prepare_out_dir(cfg, args)
    reset_optimizer_step_count()
    writer = _IterationWriter(out_dir)
    try:
        state = run_growth(net, train, growth_config, test_set=test,
                           cluster_table=cluster_table,
                           max_iterations=max_iterations,
                           on_iteration=writer)
    finally:
        writer.close()
    save_checkpoint(state.net, out_dir / "checkpoint.json")
    _write_branch_series(out_dir / "branch_series.csv", state.branch_points)
    _write_candidates(out_dir / "candidates.jsonl", state.candidate_records)
    accepted = sum(r.accepted for r in state.records)
    final = state.records[-1] if state.records else None
    _write_json(out_dir / "run_meta.json", {
        "command": "grow",
        "dataset": cfg["data"]["dataset"].strip().lower(),
        "seed": cfg["run"].getint("seed"),
        "input_hashes": _input_hashes(cfg, args),
        "optimizer_steps": optimizer_step_count(),
        "iterations": len(state.records),
        "candidates_seen": sum(r.candidates_seen for r in state.records),
        "accepted_branches": accepted,
        "branch_count": state.net.n_branches,
        "parameter_count": parameter_count(state.net),
        "selection_loss": state.prev_selection_loss,
        "test_accuracy": _json_num(final.test_accuracy) if final else None,
        "test_loss": _json_num(final.test_loss) if final else None,
    })
    log.info("growth done: %d branches accepted, test accuracy %s -> %s",
             accepted, f"{final.test_accuracy:.4f}" if final else "n/a",
             out_dir)
    return EXIT_OK


def cmd_transfer(args, cfg) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .growth import transfer_task
    from .nam_model import parameter_count
    from .nn_core import optimizer_step_count, reset_optimizer_step_count

    base_net = load_checkpoint(args.checkpoint)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    growth_config = _growth_config(cfg, "election")
    cluster_table = (_load_cluster_cache(args.cluster_cache)
                     if args.cluster_cache else None)
    out_dir = _prepare_out_dir(cfg, args)
    reset_optimizer_step_count()
    writer = _IterationWriter(out_dir)
    try:
        state = transfer_task(base_net, train, growth_config, test_set=test,
                              cluster_table=cluster_table,
                              on_iteration=writer)
    finally:
        writer.close()
    steps = optimizer_step_count()
    if steps != 0:
        raise RuntimeError(
            f"transfer must never train, but {steps} optimizer steps ran")
    save_checkpoint(state.net, out_dir / "checkpoint.json")
    _write_branch_series(out_dir / "branch_series.csv", state.branch_points)
    _write_candidates(out_dir / "candidates.jsonl", state.candidate_records)
    with open(out_dir / "transfer_series.csv", "w", newline="") as fh:
        series_writer = csv.writer(fh)
        series_writer.writerow(["iteration", "branches", "train_accuracy",
                                "test_accuracy"])
        for record, train_accuracy in zip(state.records,
                                          state.train_accuracy_series):
            series_writer.writerow([record.iteration, record.branch_count,
                                    train_accuracy, record.test_accuracy])
    empty = state.net.n_branches == 0
    if empty:
        log.warning("no placement qualified: transfer produced an empty "
                    "election network (prediction on it will fail)")
    final = state.records[-1] if state.records else None
    _write_json(out_dir / "run_meta.json", {
        "command": "transfer",
        "dataset": cfg["data"]["dataset"].strip().lower(),
        "seed": cfg["run"].getint("seed"),
        "input_hashes": _input_hashes(cfg, args),
        "optimizer_steps": steps,
        "iterations": len(state.records),
        "accepted_branches": state.net.n_branches,
        "branch_count": state.net.n_branches,
        "parameter_count": parameter_count(state.net),
        "empty_network": empty,
        "train_accuracy": (state.train_accuracy_series[-1]
                           if state.train_accuracy_series else None),
        "test_accuracy": _json_num(final.test_accuracy) if final else None,
        "test_loss": _json_num(final.test_loss) if final else None,
    })
    log.info("transfer done: %d branches kept, optimizer steps %d -> %s",
             state.net.n_branches, steps, out_dir)
    return EXIT_OK


def cmd_cluster_cache(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .clustering import clusters_to_json
    from .data_io import sha256_file
    from .growth import source_cluster_table

    net = load_checkpoint(args.checkpoint)
    if args.target_command == "grow":
        mlps = [br.mlp for br in net.branches if br.origin == "base"]
        if not mlps:
            raise ValueError("checkpoint has no base branches to cluster")
    else:
        mlps = [br.mlp for br in net.branches]
        if not mlps:
            raise ValueError("checkpoint has no branches to cluster")
    growth_config = _growth_config(cfg, "tuning")
    out_dir = _prepare_out_dir(cfg, args)
    log.info("clustering %d branch MLPs (cache for %s)", len(mlps),
             args.target_command)
    table = source_cluster_table(mlps, growth_config)
    (out_dir / "cluster_cache.json").write_text(clusters_to_json(table) + "\n")
    hashes = {"checkpoint": sha256_file(args.checkpoint)}
    if getattr(args, "config", None):
        hashes["config"] = sha256_file(args.config)
    _write_json(out_dir / "run_meta.json", {
        "command": "cluster-cache",
        "for": args.target_command,
        "seed": cfg["run"].getint("seed"),
        "input_hashes": hashes,
        "source_branches": len(mlps),
        "cluster_counts": [[s.n_clusters for s in per_branch]
                           for per_branch in table],
    })
    log.info("cluster cache for %d branches -> %s", len(mlps), out_dir)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .nam_model import (elect_batch, evaluate, network_forward_batch,
                            parameter_count)

    net = load_checkpoint(args.checkpoint)
    dataset = _load_split(cfg, args.split)
    _check_geometry(net, dataset)
    accuracy, loss = evaluate(net, dataset)
    if net.mode == "election":
        _, preds = elect_batch(net, dataset.images)
    else:
        preds = np.argmax(network_forward_batch(net, dataset.images), axis=1)
    per_class = [float(np.mean(preds[dataset.labels == c] == c))
                 for c in range(net.n_classes)]
    doc = {
        "checkpoint": str(args.checkpoint),
        "dataset": cfg["data"]["dataset"].strip().lower(),
        "split": args.split,
        "mode": net.mode,
        "accuracy": accuracy,
        "loss": loss,
        "per_class_accuracy": per_class,
        "branch_count": net.n_branches,
        "parameter_count": parameter_count(net),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _add_common_arguments(parser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--dataset", choices=["cifar10", "mnist"],
                        help="override [data] dataset")
    parser.add_argument("--data-dir", dest="data_dir",
                        help="override [data] data_dir")
    parser.add_argument("--out-dir", dest="out_dir",
                        help="override [run] out_dir")
    parser.add_argument("--threads", type=int,
                        help="BLAS/OpenMP thread cap (0 = all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="namgrow",
        description="Grow neural additive models by re-using trained branches.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base",
                       help="train a base or full-perception network")
    _add_common_arguments(p)
    p.add_argument("--grid", choices=["base", "full"],
                   help="override [model] grid")
    p.add_argument("--epochs", type=int, help="override [train] epochs")
    p.set_defaults(handler=cmd_train_base)

    p = sub.add_parser("grow", help="grow a trained network on its own task")
    _add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, help="base checkpoint JSON")
    p.add_argument("--max-iterations", dest="max_iterations", type=int,
                   help="override [growth] max_iterations (-1 = no limit)")
    p.add_argument("--cluster-cache", dest="cluster_cache",
                   help="precomputed cluster_cache.json (skips clustering)")
    p.set_defaults(handler=cmd_grow)

    p = sub.add_parser("transfer",
                       help="transfer branches to a new task (election mode)")
    _add_common_arguments(p)
    p.add_argument("--checkpoint", required=True,
                   help="source-task checkpoint JSON")
    p.add_argument("--cluster-cache", dest="cluster_cache",
                   help="precomputed cluster_cache.json (skips clustering)")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out", help="also write the metrics JSON to this file")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("cluster-cache",
                       help="precompute branch cluster summaries for re-use")
    _add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    p.add_argument("--for", dest="target_command",
                   choices=["grow", "transfer"], default="grow",
                   help="consumer command (grow clusters only the original "
                        "trained branches, transfer clusters all branches)")
    p.set_defaults(handler=cmd_cluster_cache)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _set_thread_limit(cfg)
        return args.handler(args, cfg)
    except (ConfigError, configparser.Error) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
