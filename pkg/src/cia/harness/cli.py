"""Command line entry point: ``cia <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import netlib
from .. import tensor_core
from . import experiment
from .dataset import generate_dataset, load_dataset, save_dataset

log = logging.getLogger("cia")


def _dataset_gen(args):
    train, test = generate_dataset(args.seed, args.n_train, args.n_test)
    save_dataset(args.out, train, test)
    log.info("wrote %d train / %d test images to %s", len(train), len(test), args.out)


def _train(args):
    train, test = load_dataset(args.dataset)
    net = netlib.build_network(args.arch_variant, seed=args.seed)
    net = netlib.train(net, train, epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed, log=log.info)
    netlib.save(net, args.out)
    acc = netlib.accuracy(net, test.images, test.labels)
    log.info("variant %s: held-out accuracy %.4f -> %s", args.arch_variant, acc, args.out)


def _attack(args):
    cfg = experiment.load_config(args.config)
    if not cfg.images_dir:
        raise experiment.ConfigError("the attack command needs images_dir in the config")
    experiment.run_attack_stage(cfg, log.info)


def _eval(args):
    cfg = experiment.load_config(args.config)
    text = experiment.run_eval_stage(cfg)
    if not cfg.report:
        sys.stdout.write(text)


def _run(args):
    cfg = experiment.load_config(args.config)
    text = experiment.run_experiment(cfg, log.info)
    if not cfg.report:
        sys.stdout.write(text)


def _report(args):
    table = experiment.pivot_report(Path(args.inp).read_text())
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cia", description="Centered Initial Attack experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic dataset tools")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    gen = ds_sub.add_parser("gen", help="render the procedural dataset")
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--n-train", type=int, default=8000)
    gen.add_argument("--n-test", type=int, default=1000)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_dataset_gen)

    tr = sub.add_parser("train", help="train one classifier variant")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--arch-variant", default="A", choices=sorted(netlib.ARCH_VARIANTS))
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch", type=int, default=64)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_train)

    for name, func, help_ in (
        ("attack", _attack, "craft adversarial PPMs for a config"),
        ("eval", _eval, "evaluate previously crafted PPMs"),
        ("run", _run, "attack + evaluate in one go"),
    ):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", required=True)
        c.set_defaults(func=func)

    rep = sub.add_parser("report", help="pivot a CSV report into markdown tables")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--out")
    rep.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    log.debug("convolution backend: %s", tensor_core.BACKEND)
    try:
        args.func(args)
    except (experiment.ConfigError, netlib.ModelFormatError, FileNotFoundError) as e:
        log.error("error: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
