"""``shakedrop`` command line: train, eval, gradcheck, sweep, expectation-test.

Every failure prints one line ``error: <category>: <reason>`` to stderr and
exits nonzero: 2 for invalid configs or usage, 3 for divergence, 4 for a
failed numerical check, 5 for a sweep with failed cells, 1 for I/O errors.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from shakedrop.config import ConfigError, ExperimentConfig, parse_text
from shakedrop.data import LabeledImageSet, load_cifar_binary, synth_dataset
from shakedrop.expectation import Z_LIMIT, expectation_test
from shakedrop.gradcheck import block_checks, decoupled_ratio, finite_diff_check, op_checks
from shakedrop.metrics import CsvSink, MetricsRecord
from shakedrop.models import Network, build_network
from shakedrop.rng import DATA, REGULARIZER, RandomStreams
from shakedrop.snapshot import load_params, save_params
from shakedrop.training import evaluate, train

EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECK, EXIT_SWEEP = 1, 2, 3, 4, 5
LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
SUMMARY_HEADER = "depth,p_L,final_eval_top1,status"


class CliFailure(Exception):
    def __init__(self, code: int, category: str, reason: str):
        super().__init__(reason)
        self.code, self.category, self.reason = code, category, reason


# shared plumbing ------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledImageSet, Optional[LabeledImageSet]]:
    """Training and evaluation splits; synthetic splits come from one draw so they share classes."""
    kind = cfg.synthetic_kind
    if kind is not None:
        n, n_eval = cfg["data.n"], cfg["data.eval_n"]
        rng = RandomStreams(cfg["run.seed"]).generator(DATA)
        full = synth_dataset(kind, n + n_eval, cfg["data.classes"], cfg["data.noise"], rng,
                             image_size=cfg["data.image_size"], channels=cfg["data.channels"])
        train_set = LabeledImageSet(full.images[:n], full.labels[:n], full.num_classes)
        eval_set = None
        if n_eval:
            eval_set = LabeledImageSet(full.images[n:], full.labels[n:], full.num_classes,
                                       train_set.mean, train_set.std)
        return train_set, eval_set
    train_set = load_cifar_binary(cfg["data.source"], cfg["data.variant"])
    eval_set = None
    if cfg["data.eval_source"]:
        ev = load_cifar_binary(cfg["data.eval_source"], cfg["data.variant"])
        eval_set = LabeledImageSet(ev.images, ev.labels, ev.num_classes, train_set.mean, train_set.std)
    return train_set, eval_set


def make_network(cfg: ExperimentConfig, depth: Optional[int] = None, p_L: Optional[float] = None) -> Network:
    net = build_network(cfg.architecture(depth, p_L), seed=cfg["run.seed"])
    for bn in net.batchnorms():
        bn.state.eps = cfg["bn.eps"]
        bn.state.momentum = cfg["bn.momentum"]
    return net.astype(cfg.dtype)


def run_training(cfg: ExperimentConfig, out: Path) -> list[MetricsRecord]:
    """Train one configuration and write config.resolved, metrics.csv and params.bin into ``out``."""
    train_set, eval_set = load_datasets(cfg)
    if cfg["optimizer.batch_size"] > len(train_set):
        raise CliFailure(EXIT_CONFIG, "config", "optimizer.batch_size exceeds the training set size")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved(), encoding="utf-8", newline="\n")
    net = make_network(cfg)
    sink = CsvSink(out / "metrics.csv")
    records = train(net, train_set, eval_set, cfg.optimizer(), cfg.schedule(), cfg.train_options(), [sink])
    save_params(net, out / "params.bin")
    return records


# subcommands ------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg["run.out"])
    records = run_training(cfg, out)
    if records and records[-1].diverged:
        raise CliFailure(EXIT_DIVERGED, "diverged", f"non-finite loss at epoch {records[-1].epoch}")
    if records:
        r = records[-1]
        print(f"trained epochs={len(records)} train_top1={r.train_top1_error:.6g} "
              f"eval_top1={r.eval_top1_error:.6g} out={out}")
    else:
        print(f"trained epochs=0 out={out}")
    return 0


def cmd_eval(cfg: ExperimentConfig, params: Optional[str]) -> int:
    out = Path(cfg["run.out"])
    params_path = Path(params) if params else out / "params.bin"
    train_set, eval_set = load_datasets(cfg)
    net = make_network(cfg)
    load_params(net, params_path)
    target = eval_set if eval_set is not None else train_set
    mean, std = (train_set.mean, train_set.std) if cfg["run.normalize"] else (None, None)
    loss, err = evaluate(net, target, cfg["run.eval_batch_size"], mean, std)
    print(f"eval_loss={loss:.6g} eval_top1={err:.6g} samples={len(target)}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    tol = cfg["gradcheck.tolerance"]
    limit = cfg["gradcheck.max_elements"]
    worst: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for s in range(cfg["gradcheck.seeds"]):
        rng = np.random.default_rng([cfg["run.seed"], s])
        for check in op_checks(rng) + block_checks(rng):
            res = finite_diff_check(check.fn, check.inputs, rng=rng, max_elements=limit)
            worst[check.name] = max(worst.get(check.name, 0.0), res.max_error)
            skipped[check.name] = skipped.get(check.name, 0) + res.skipped
    failed = []
    for name, err in worst.items():
        status = "ok" if err < tol else "FAIL"
        if status == "FAIL":
            failed.append(name)
        print(f"{name} max_rel_err={err:.3e} skipped={skipped[name]} status={status}")
    a, b = cfg["gradcheck.alpha"], cfg["gradcheck.beta"]
    ratio = decoupled_ratio(a, b, np.random.default_rng(cfg["run.seed"]))
    expected = b / a
    ratio_ok = abs(ratio - expected) <= 1e-9
    print(f"shakedrop_frozen_b0 alpha={a:g} beta={b:g} branch_grad_ratio={ratio:.12g} "
          f"expected={expected:.12g} status={'intentional-mismatch' if ratio_ok else 'FAIL'}")
    if not ratio_ok:
        failed.append("shakedrop_frozen_b0")
    if failed:
        raise CliFailure(EXIT_CHECK, "gradcheck", f"{failed[0]} exceeds tolerance {tol:g}")
    return 0


def _sweep_cell(args: tuple[str, int, float, int, str]) -> tuple[float, str]:
    resolved, depth, p_L, seed, out = args
    cfg = ExperimentConfig.from_mapping(parse_text(resolved))
    try:
        cell = cfg.replace(arch__depth=depth, reg__p_L=p_L, run__seed=seed, run__out=out)
        records = run_training(cell, Path(out))
    except CliFailure as exc:
        return float("nan"), f"error:{exc.category}"
    except (ValueError, OSError) as exc:
        return float("nan"), "error:" + type(exc).__name__
    if not records:
        return float("nan"), "ok"
    last = records[-1]
    return last.eval_top1_error, "diverged" if last.diverged else "ok"


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    grid = list(itertools.product(cfg["sweep.p_L"], cfg["sweep.depths"]))
    seed = cfg["run.seed"]
    jobs = [(cfg.resolved(), depth, p_L, (seed + i) % 2**64, str(out / f"cell-{i:03d}"))
            for i, (p_L, depth) in enumerate(grid)]
    if cfg["sweep.processes"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg["sweep.processes"]) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]
    lines = [SUMMARY_HEADER]
    for (p_L, depth), (err, status) in zip(grid, results):
        lines.append(f"{depth},{p_L:.6g},{err:.6g},{status}")
    (out / "summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    print(f"sweep cells={len(grid)} summary={out / 'summary.csv'}")
    bad = sum(1 for _, status in results if status != "ok")
    if bad:
        raise CliFailure(EXIT_SWEEP, "sweep", f"{bad} of {len(grid)} cells failed")
    return 0


def cmd_expectation_test(cfg: ExperimentConfig) -> int:
    reg = cfg.regularizer()
    if reg.kind.value == "none":
        raise CliFailure(EXIT_CONFIG, "config", "expectation-test needs reg.kind other than none")
    streams = RandomStreams(cfg["run.seed"])
    shape = cfg["expect.shape"]
    data_rng = streams.generator(DATA, 1)
    branch = data_rng.standard_normal(shape)
    second = data_rng.standard_normal(shape)
    l, L = cfg["expect.l"], cfg["expect.L"]
    res = expectation_test(reg, branch, cfg["expect.draws"], streams.generator(REGULARIZER, l, 0),
                           l=l, L=L, second_branch=second)
    print(f"kind={reg.kind.value} granularity={reg.granularity.value} draws={res.draws} "
          f"eval_coefficient={res.eval_coefficient:.12g} max_z={res.max_z:.4f} limit={Z_LIMIT:g}")
    if not res.passed():
        raise CliFailure(EXIT_CHECK, "expectation", f"max z-score {res.max_z:.4f} exceeds {Z_LIMIT:g}")
    return 0


# argument handling ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Turns argparse's multi-line usage errors into a single failure line."""

    def error(self, message: str):
        raise CliFailure(EXIT_CONFIG, "usage", message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", help="run.seed override (unsigned 64-bit)")
    common.add_argument("--out", help="run.out override (output directory)")
    common.add_argument("--workers", help="run.workers override (replica count)")
    parser = _Parser(prog="shakedrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one configuration")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved params.bin")
    ev.add_argument("--params", help="parameter dump (default: <out>/params.bin)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sub.add_parser("sweep", parents=[common], help="train a p_L × depth grid")
    sub.add_parser("expectation-test", parents=[common], help="Monte-Carlo Train/Eval consistency")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("SHAKEDROP_LOG", "quiet")
    if level not in LOG_LEVELS:
        raise CliFailure(EXIT_CONFIG, "config", f"SHAKEDROP_LOG must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.set)
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("workers", "run.workers")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={value}")
    return ExperimentConfig.load(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging()
        cfg = _resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.params)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_expectation_test(cfg)
    except CliFailure as exc:
        print(f"error: {exc.category}: {exc.reason}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: io: {exc.strerror or exc} ({exc.filename})", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
