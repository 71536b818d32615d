"""Command-line entry point.

Commands: synth, augment, train, eval, gradcheck. Every config key is
mirrored as a flag; precedence is defaults < config file < CACPS_OUTPUT_DIR
env var < explicit flags. Exit codes: 0 success, 1 validation error,
2 runtime error, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    restore,
    save_checkpoint,
)
from .config import (
    SCHEMA,
    ConfigError,
    ExperimentConfig,
    default_config,
    load_config,
    parse_override,
)
from .data import DOMAIN_PRESETS, DataError, generate_benchmark, load_corpus, make_split, save_corpus
from .fourier import FourierError, MixConfig, augment
from .gradcheck import all_passed, format_table, run_gradcheck
from .losses import LossError
from .metrics import MetricError
from .network import NetworkError, init_pair
from .optim import OptimError
from .report import (
    ReportError,
    append_train_rows,
    format_summary,
    plot_augment_panels,
    plot_dice_bars,
    plot_training_curves,
    read_train_rows,
    write_metric_rows,
)
from .tensor import TensorError
from .trainer import TrainerError, TrainReport, evaluate, make_optimizer, train_run

ENV_OUTPUT_DIR = "CACPS_OUTPUT_DIR"

_RUNTIME_ERRORS = (
    CheckpointError, DataError, FourierError, LossError, MetricError,
    NetworkError, OptimError, ReportError, TensorError, TrainerError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage problems; the contract wants 1
    def error(self, message):
        raise UsageError(message)


def _schema_value(key):
    def parse(raw, _key=key):
        return parse_override(_key, raw)
    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="config file to start from")
    for key in SCHEMA:
        p.add_argument(
            f"--{key.replace('_', '-')}", dest=key, default=None,
            type=_schema_value(key), metavar="V",
            help=argparse.SUPPRESS,
        )


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        cfg = cfg.replace(output_dir=env_out)
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg.validated()


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_pool(cfg: ExperimentConfig):
    if cfg.dataset == "synthetic":
        return generate_benchmark(
            n_subjects=cfg.n_subjects, size=cfg.image_size, seed=cfg.dataset_seed
        )
    return load_corpus(cfg.dataset, num_classes=cfg.num_classes)


def _read_gray(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image not found: {p}")
    arr = np.asarray(Image.open(p))
    if arr.ndim != 2:
        raise DataError(f"{p.name}: expected a single-channel raster, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float64) / 65535.0
    raise DataError(f"{p.name}: unsupported pixel type {arr.dtype}")


def _write_gray16(path, image: np.ndarray) -> None:
    Image.fromarray(np.round(image * 65535.0).astype(np.uint16)).save(path)


# -- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    pool = generate_benchmark(
        n_subjects=cfg.n_subjects, size=cfg.image_size, seed=cfg.dataset_seed
    )
    dest = _out_dir(cfg) / "corpus"
    save_corpus(dest, pool, presets=DOMAIN_PRESETS, seed=cfg.dataset_seed)
    domains = sorted({s.hidden_domain for s in pool})
    print(f"wrote {len(pool)} subjects across domains {', '.join(domains)} to {dest}")
    return 0


def cmd_augment(args) -> int:
    try:
        mix = MixConfig(lam=args.lam, alpha=args.alpha, mode=args.mode)
    except FourierError as exc:
        raise ConfigError(str(exc))
    x = _read_gray(args.input)
    partner = _read_gray(args.partner)
    if x.shape != partner.shape:
        raise DataError(f"size mismatch: {x.shape} vs {partner.shape}")
    z = augment(x, partner, mix)
    _write_gray16(args.output, z)
    print(f"wrote {args.output}")
    if args.spectra:
        plot_augment_panels(x, partner, z, mix, args.spectra)
        print(f"wrote {args.spectra}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = ck.config
        env_out = os.environ.get(ENV_OUTPUT_DIR)
        if env_out:
            cfg = cfg.replace(output_dir=env_out)
        overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
        if overrides:
            cfg = cfg.replace(**overrides)
        cfg = cfg.validated()
        _, pair, opt = restore(ck)
        start_epoch = ck.epoch
    else:
        cfg = resolve_config(args)
        tc = cfg.train_config()
        pair = init_pair(cfg.net_spec(), tc.seed_net1, tc.seed_net2)
        opt = None
        start_epoch = 0

    tc = cfg.train_config()
    out = _out_dir(cfg)
    (out / "config.cfg").write_text(cfg.to_text())

    pool = _load_pool(cfg)
    items, _ = make_split(pool, cfg.split_spec())

    csv_path = out / "train_report.csv"
    report = TrainReport()
    if args.resume and csv_path.is_file():
        report.rows.extend(r for r in read_train_rows(csv_path) if r.epoch < start_epoch)

    def on_epoch(epoch, pair_, opt_, rep):
        append_train_rows(csv_path, [rep.rows[-1]])
        if (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_epoch_{epoch + 1:04d}.ckpt", cfg, pair_, opt_, epoch + 1)

    if not csv_path.is_file():
        append_train_rows(csv_path, [])  # header only; makes --epochs 0 leave a report
    opt = opt if opt is not None else make_optimizer(pair, tc)
    report = train_run(pair, items, tc, opt=opt, start_epoch=start_epoch,
                       report=report, epoch_callback=on_epoch)

    save_checkpoint(out / "ckpt_final.ckpt", cfg, pair, opt, max(tc.epochs, start_epoch))
    if cfg.figures and report.rows:
        plot_training_curves(report.rows, out / "training_curves.png")
    print(f"trained to epoch {max(tc.epochs, start_epoch)}; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg, pair, _ = restore(ck)
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        cfg = cfg.replace(output_dir=env_out)
    if overrides:
        cfg = cfg.replace(**overrides).validated()

    pool = _load_pool(cfg)
    _, test = make_split(pool, cfg.split_spec())
    rows, agg = evaluate(pair, test, hd_percentile=cfg.hd_percentile)

    out = _out_dir(cfg)
    write_metric_rows(out / "metrics.csv", rows)
    summary = format_summary(agg)
    (out / "summary.txt").write_text(summary)
    if cfg.figures:
        plot_dice_bars(agg, out / "dice_bars.png")
    sys.stdout.write(summary)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(size=args.size, seed=args.seed)
    print(format_table(results))
    return 0 if all_passed(results) else 3


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cacps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="write the synthetic 4-domain corpus")
    _add_config_flags(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_aug = sub.add_parser("augment", help="re-style one image with a partner's amplitude")
    p_aug.add_argument("input")
    p_aug.add_argument("partner")
    p_aug.add_argument("output")
    p_aug.add_argument("--lam", type=float, default=1.0)
    p_aug.add_argument("--alpha", type=float, default=0.1)
    p_aug.add_argument("--mode", choices=("strict", "rectified"), default="rectified")
    p_aug.add_argument("--spectra", metavar="FILE", default=None,
                       help="also render image/spectrum panels to FILE")
    p_aug.set_defaults(func=cmd_augment)

    p_train = sub.add_parser("train", help="train the cross-supervised pair")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", metavar="CKPT", default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the held-out domain")
    p_eval.add_argument("--checkpoint", required=True)
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p_gc.add_argument("--size", type=int, default=8)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
