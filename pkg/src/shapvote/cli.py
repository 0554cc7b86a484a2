"""Command-line interface: ``shapvote <subcommand> [options]``.

Outputs go under ``--out`` with fixed names:

gen-data       train.sxpdata, val.sxpdata
train          model.sxpnet, train_log.csv
explain        saliency.csv, heatmaps/example_NNNNN.pgm
eval           metrics.csv (+ per_example.csv with --per-example)
verify         verify.csv (when --out is given)
sample-kernel  kernel_hist.csv
sweep-lambda   sweep.csv

Training and data options can come from a flat ``key = value`` file given by
``--config``; command-line flags override it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

from . import verify as verify_mod
from .data import SyntheticTaskSpec, generate, read_dataset, write_dataset
from .exceptions import DomainError, FormatError, ShapvoteError
from .game import ShapleyKernel, sample_coalitions
from .metrics import MetricReport, evaluate, heatmap_pgm, intrinsic_saliency
from .model import decompose_batch, load_checkpoint
from .trainer import (
    TrainConfig,
    accuracy,
    coerce_value,
    format_value,
    mean_fidelity_error,
    read_config_file,
    train,
    validation_shapley_loss,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_BAD_FORMAT = 5
EXIT_MODULE_ERROR = 6

TRAIN_FILE = "train.sxpdata"
VAL_FILE = "val.sxpdata"

logger = logging.getLogger("shapvote")


class ConfigError(Exception):
    pass


def _add_dataclass_flags(parser, cls) -> None:
    group = parser.add_argument_group(f"{cls.__name__} options")
    for f in dataclasses.fields(cls):
        group.add_argument(
            "--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None, metavar="VALUE",
            help=f"(default: {f.default})",
        )


def _resolve(cls, args):
    """Dataclass defaults < --config file < explicit flags."""
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for f in dataclasses.fields(cls):
        flag = getattr(args, f"cfg_{f.name}", None)
        if flag is not None:
            values[f.name] = flag
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) for {cls.__name__}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        kind = type(getattr(defaults, key))
        try:
            kwargs[key] = coerce_value(str(raw), kind)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    resolved = cls(**kwargs)
    try:
        resolved.validate()
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    return resolved


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def _load_data(path):
    if os.path.isdir(path):
        path = os.path.join(path, VAL_FILE)
    return read_dataset(path)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = _resolve(SyntheticTaskSpec, args)
    train_set, val_set = generate(spec)
    os.makedirs(args.out, exist_ok=True)
    write_dataset(train_set, os.path.join(args.out, TRAIN_FILE))
    write_dataset(val_set, os.path.join(args.out, VAL_FILE))
    print(f"wrote {len(train_set)} train / {len(val_set)} val examples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve(TrainConfig, args)
    train_set = read_dataset(os.path.join(args.data, TRAIN_FILE))
    val_path = os.path.join(args.data, VAL_FILE)
    val_set = read_dataset(val_path) if os.path.exists(val_path) else None
    result = train(train_set, config, val_set, out_dir=args.out)
    final = result.log[-1]
    print(
        f"trained {final['step']} steps; loss_cls={final['loss_cls']:.4f} "
        f"loss_shap={final['loss_shap']:.4f} val_acc={format_value(final['val_acc'])}"
    )
    return EXIT_OK


def cmd_explain(args) -> int:
    net = load_checkpoint(args.model)
    data = _load_data(args.data)
    if args.limit is not None:
        data = data.subset(slice(0, args.limit))
    x = decompose_batch(data.images, data.patch_size)
    saliency, pred = intrinsic_saliency(net, x)
    heat_dir = os.path.join(args.out, "heatmaps")
    os.makedirs(heat_dir, exist_ok=True)
    rows = []
    grid = (data.images.shape[1] // data.patch_size, data.images.shape[2] // data.patch_size)
    for i in range(len(x)):
        rows.extend((i, n, int(pred[i]), float(saliency[i, n])) for n in range(net.n_patches))
        with open(os.path.join(heat_dir, f"example_{i:05d}.pgm"), "wb") as fh:
            fh.write(heatmap_pgm(saliency[i], grid, scale=data.patch_size))
    _write_csv(os.path.join(args.out, "saliency.csv"), ("example", "patch", "class", "value"), rows)
    print(f"explained {len(x)} examples into {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.model)
    data = _load_data(args.data)
    if args.limit is not None:
        data = data.subset(slice(0, args.limit))
    x = decompose_batch(data.images, data.patch_size)
    saliency, pred = intrinsic_saliency(net, x)
    if args.saliency == "random":
        saliency = np.random.default_rng(args.seed).random(saliency.shape)
    report = evaluate(
        net, x, saliency, pred, data.gt_masks,
        aopc_steps=args.aopc_steps, saco_groups=args.saco_groups,
        fidelity=args.fidelity and net.n_patches <= 12,
    )
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "metrics.csv"), MetricReport.columns(), [report.row()])
    if args.per_example:
        names = list(report.per_example)
        rows = [[i] + [report.per_example[k][i] for k in names] for i in range(report.n_examples)]
        _write_csv(os.path.join(args.out, "per_example.csv"), ["example"] + names, rows)
    for name, value in zip(MetricReport.columns(), report.row()):
        print(f"{name}: {format_value(value)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run_all(quick=args.quick, inject_mutation=args.inject_mutation)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.value:.3g} (limit {r.threshold:g}) {r.detail}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(
            os.path.join(args.out, "verify.csv"), ("check", "passed", "value", "threshold", "detail"),
            [(r.name, r.passed, float(r.value), float(r.threshold), r.detail) for r in results],
        )
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_sample_kernel(args) -> int:
    dist = ShapleyKernel(args.n_players)
    sizes = sample_coalitions(np.random.default_rng(args.seed), dist, args.draws).sum(axis=1)
    hist = np.bincount(sizes, minlength=args.n_players)[1:args.n_players] / args.draws
    os.makedirs(args.out, exist_ok=True)
    rows = [(k, float(hist[k - 1]), float(dist.size_marginals[k - 1])) for k in range(1, args.n_players)]
    _write_csv(os.path.join(args.out, "kernel_hist.csv"), ("size", "empirical", "analytic"), rows)
    print(f"L1 distance to analytic marginals: {np.abs(hist - dist.size_marginals).sum():.5f}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    base = _resolve(TrainConfig, args)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --lambdas value {args.lambdas!r}") from exc
    train_set = read_dataset(os.path.join(args.data, TRAIN_FILE))
    val_set = read_dataset(os.path.join(args.data, VAL_FILE))
    xv = decompose_batch(val_set.images, val_set.patch_size)
    rows = []
    for lam in lambdas:
        config = dataclasses.replace(base, lam=lam, fidelity_examples=0)
        net = train(train_set, config).net
        acc = accuracy(net, xv, val_set.labels)
        fid = mean_fidelity_error(net, xv[:base.fidelity_examples]) if net.n_patches <= 12 else None
        shap = validation_shapley_loss(net, xv, val_set.labels, config, seed=config.seed)
        rows.append((lam, acc, fid, shap))
        print(f"lam={lam:g}: val_acc={acc:.4f} val_shap_fidelity={format_value(fid)} val_shap_loss={shap:.5f}")
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "sweep.csv"), ("lam", "val_acc", "val_shap_fidelity", "val_shap_loss"), rows)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapvote", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, SyntheticTaskSpec)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help=f"directory holding {TRAIN_FILE} (and {VAL_FILE})")
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    for name, func, text in (
        ("explain", cmd_explain, "export the model's own per-patch explanations"),
        ("eval", cmd_eval, "faithfulness and localisation metrics"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True, help="SXPDATA1 file, or a directory holding val.sxpdata")
        p.add_argument("--out", required=True)
        p.add_argument("--limit", type=int)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--saliency", choices=("intrinsic", "random"), default="intrinsic")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--aopc-steps", type=int, default=10)
            p.add_argument("--saco-groups", type=int, default=10)
            p.add_argument("--per-example", action="store_true")
            p.add_argument("--fidelity", action="store_true", help="exact Shapley fidelity (N <= 12)")

    p = sub.add_parser("verify", help="run the built-in verification suite")
    p.add_argument("--out")
    p.add_argument("--quick", action="store_true", help="fewer random cases")
    p.add_argument("--inject-mutation", action="store_true", help="corrupt one gradient; the suite must fail")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sample-kernel", help="coalition-size histogram of the kernel sampler")
    p.add_argument("--n-players", type=int, default=16)
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_kernel)

    p = sub.add_parser("sweep-lambda", help="train over a grid of Shapley-loss weights")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", default="0,0.1,0.3,1,3,10")
    _add_dataclass_flags(p, TrainConfig)
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_FORMAT
    except ShapvoteError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_MODULE_ERROR
    except ValueError as exc:
        # config file syntax errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
