"""Command-line interface: ``arcconv <command> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage / bad input, 3 training diverged.
Machine-readable CSV goes to stdout (or ``--out``); human-readable notes go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import analysis, archive, datagen
from .layer import ArcLayerConfig
from .model import (STAGES, TrainConfig, TrainingDivergence, model_from_config, parse_stages,
                    resnet50_descriptor, smallnet_descriptor, train)
from .rotation import sampling_matrix
from .tensor import ConfigurationError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("arcconv")


class UsageError(Exception):
    pass


def _emit(rows: Sequence[Sequence], out: Optional[str]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _note(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- rotate


def rotate_entry(value: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate every trailing k x k plane of `value` counter-clockwise by `angle_deg`."""
    if value.ndim < 2 or value.shape[-1] != value.shape[-2]:
        raise UsageError(f"entry of shape {value.shape} has no square trailing k x k planes")
    k = value.shape[-1]
    S = sampling_matrix(np.asarray(math.radians(angle_deg)), k).astype(value.dtype)
    flat = value.reshape(-1, k * k)
    return (flat @ S.T).reshape(value.shape).astype(value.dtype)


def cmd_rotate(args) -> int:
    entries = archive.load_archive(args.input)
    if args.entry is not None:
        if args.entry not in entries:
            raise UsageError(f"archive has no entry named {args.entry!r}")
        name = args.entry
    else:
        candidates = [k for k, v in entries.items() if v.ndim >= 2 and v.shape[-1] == v.shape[-2]]
        if not candidates:
            raise UsageError("archive contains no kernel entry (no square trailing planes)")
        name = candidates[0]
    entries[name] = rotate_entry(entries[name], args.angle)
    archive.save_archive(args.out, entries)
    _note(f"rotated {name!r} by {args.angle} degrees -> {args.out}")
    return EXIT_OK


# ------------------------------------------------------------- checks


REPORT_HEADER = ("check", "status", "metric", "tolerance", "fingerprint")


def _report_rows(reports: List[analysis.CheckReport]):
    rows = [REPORT_HEADER]
    for r in reports:
        rows.append((r.name, r.status, repr(r.metric), repr(r.tolerance), r.fingerprint))
        _note(r.summary())
    return rows


def cmd_gradcheck(args) -> int:
    targets = analysis.GRADCHECK_TARGETS if args.target == "all" else (args.target,)
    reports = [analysis.gradcheck(t, seed=args.seed, eps=args.eps, tol=args.tol) for t in targets]
    _emit(_report_rows(reports), args.out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def cmd_equiv(args) -> int:
    report = analysis.check_equivalence(seed=args.seed, dtype=np.dtype(args.dtype), tol=args.tol)
    _emit(_report_rows([report]), args.out)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_estimate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.preset == "resnet50":
        spec = "2,3,4" if args.stages is None else args.stages
        try:
            stages = [int(s) for s in spec.replace(",", " ").split()]
        except ValueError:
            raise UsageError(f"--stages must list integers 1..4, got {spec!r}") from None
        if not stages:
            raise UsageError("--stages must name at least one of 1,2,3,4")
        try:
            desc = resnet50_descriptor(stages, n=args.n, include_strided=args.include_strided)
            prev = resnet50_descriptor(stages, n=args.n - 1, include_strided=args.include_strided) if args.n > 1 else None
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
        hw = (args.input, args.input)
    else:
        stages = "A,B,C" if args.stages is None else args.stages
        try:
            desc = smallnet_descriptor("arc", stages=stages, n=args.n)
            prev = smallnet_descriptor("arc", stages=stages, n=args.n - 1) if args.n > 1 else None
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
        hw = (args.input, args.input)
    est = analysis.estimate_cost(desc, hw)
    rows = [("item", "params", "flops")]
    for kind in sorted(est.breakdown):
        rows.append((kind, est.breakdown[kind]["params"], est.breakdown[kind]["flops"]))
    rows.append(("total", est.params, est.flops))
    rows.append(("arc-overhead", "", analysis.arc_overhead_flops(est)))
    if prev is not None:
        before = analysis.estimate_cost(prev, hw)
        rows.append(("delta-vs-n-minus-1", est.params - before.params, est.flops - before.flops))
    _emit(rows, args.out)
    _note(f"{desc.name} at {hw[0]}x{hw[1]}: {est.params / 1e6:.3f} M params, {est.flops / 1e9:.3f} GFLOPs")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = ArcLayerConfig(args.channels, args.channels, n=args.n, k=args.k, padding=args.k // 2)
    rep = analysis.bench(cfg, (args.batch, args.channels, args.size, args.size), trials=args.trials,
                         warmup=args.warmup, seed=args.seed)
    rows = [("path", "median_seconds")] + [(k, repr(v)) for k, v in rep.medians.items()]
    rows += [(k, repr(v)) for k, v in rep.ratios.items()]
    _emit(rows, args.out)
    _note(", ".join(f"{k}={v:.3f}" for k, v in rep.ratios.items()))
    if not rep.state_unchanged:
        _note("parameter checksum changed during benchmarking")
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ----------------------------------------------------------------- train


METRICS_HEADER = ("epoch", "split", "loss", "accuracy")


def run_config_from_args(args) -> archive.RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = archive.parse_run_config(fh.read())
        return cfg
    return archive.RunConfig(
        mode=args.mode, n=args.n, stages=args.stages, epochs=args.epochs, seed=args.seed,
        coeff=args.coeff, adaptive_combination=not args.no_adaptive_combination,
        spatial_encoding=not args.no_spatial_encoding, backbone_lr_scale=args.backbone_lr_scale,
        lr=args.lr, momentum=args.momentum, optimizer=args.optimizer, batch_size=args.batch_size, train_count=args.train_count,
        test_count=args.test_count, bins=args.bins, out=args.out, archive=args.archive or "",
    )


def train_config(cfg: archive.RunConfig) -> TrainConfig:
    try:
        stages = parse_stages(cfg.stages) if cfg.mode == "arc" else STAGES
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if cfg.mode not in ("static", "arc"):
        raise UsageError(f"--mode must be static or arc, got {cfg.mode!r}")
    if cfg.n < 1:
        raise UsageError("--n must be >= 1")
    if cfg.train_count < 1 or cfg.test_count < 1:
        raise UsageError("train and test counts must be >= 1")
    try:
        return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum,
                           backbone_lr_scale=cfg.backbone_lr_scale, optimizer=cfg.optimizer, seed=cfg.seed, mode=cfg.mode, n=cfg.n,
                           stages=stages, angle_coefficient=math.radians(cfg.coeff),
                           spatial_encoding=cfg.spatial_encoding,
                           adaptive_combination=cfg.adaptive_combination)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None


def toy_datasets(seed: int, train_count: int, test_count: int, bins: int = 8):
    config = datagen.DatasetConfig(bins=bins, seed=seed)
    samples = datagen.generate(config, train_count + test_count)
    return datagen.split(samples, train_count / (train_count + test_count), seed=seed)


def run_training(cfg: archive.RunConfig, metrics_path: str, archive_path: Optional[str]) -> int:
    tc = train_config(cfg)
    train_set, test_set = toy_datasets(cfg.seed, cfg.train_count, cfg.test_count, cfg.bins)
    model = model_from_config(tc, bins=cfg.bins)
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

        def on_epoch(m):
            writer.writerow((m.epoch, "train", repr(m.train_loss), repr(m.train_acc)))
            writer.writerow((m.epoch, "test", repr(m.test_loss), repr(m.test_acc)))
            fh.flush()
            _note(f"epoch {m.epoch}: train loss {m.train_loss:.4f} acc {m.train_acc:.3f} | "
                  f"test loss {m.test_loss:.4f} acc {m.test_acc:.3f}")

        try:
            train(model, train_set, test_set, tc, on_epoch=on_epoch)
        except TrainingDivergence as exc:
            _note(f"training diverged: {exc}")
            return EXIT_DIVERGED
    if archive_path:
        archive.save_archive(archive_path, archive.model_state(model))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    if args.save_config:
        with open(args.save_config, "w") as fh:
            fh.write(archive.serialize_run_config(cfg))
    archive_path = cfg.archive or os.path.splitext(cfg.out)[0] + ".arcw"
    return run_training(cfg, cfg.out, archive_path)


# --------------------------------------------------------------- datagen


def cmd_datagen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = datagen.generate(datagen.DatasetConfig(bins=args.bins, seed=args.seed), args.count)
    manifest = datagen.export(args.out, samples, pgm=args.pgm)
    _note(f"wrote {manifest} ({args.count} samples, dataset checksum {datagen.dataset_checksum(samples)[:16]})")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arcconv", description="Adaptive rotated convolution toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rotate", help="rotate the kernel planes of one archive entry")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--angle", type=float, required=True, help="degrees, counter-clockwise")
    r.add_argument("--out", required=True)
    r.add_argument("--entry", help="entry to rotate (default: first entry with square trailing planes)")
    r.set_defaults(func=cmd_rotate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--target", default="all", choices=("all",) + analysis.GRADCHECK_TARGETS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("equiv", help="combined vs naive ARC forward equivalence sweep")
    e.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--tol", type=float)
    e.add_argument("--out")
    e.set_defaults(func=cmd_equiv)

    s = sub.add_parser("estimate", help="parameter / FLOP estimate")
    s.add_argument("--preset", default="resnet50", choices=("resnet50", "smallnet"))
    s.add_argument("--stages", default=None, help="resnet50: default 2,3,4; smallnet: default A,B,C")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--include-strided", action="store_true",
                   help="also replace the stride-2 3x3 conv opening each resnet stage")
    s.add_argument("--input", type=int, default=None, help="square input size (default 1024 / 32)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="time static / combined / naive forward paths")
    b.add_argument("--n", type=int, default=4)
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--size", type=int, default=56)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train the toy orientation classifier")
    d = archive.RunConfig()
    t.add_argument("--config", help="read every setting from a key=value run config file")
    t.add_argument("--save-config", help="write the effective run config to this file")
    t.add_argument("--mode", default=d.mode, choices=("static", "arc"))
    t.add_argument("--n", type=int, default=d.n)
    t.add_argument("--stages", default=d.stages)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--coeff", type=float, default=d.coeff, help="angle coefficient in degrees")
    t.add_argument("--no-adaptive-combination", action="store_true")
    t.add_argument("--no-spatial-encoding", action="store_true")
    t.add_argument("--backbone-lr-scale", type=float, default=d.backbone_lr_scale)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--optimizer", default=d.optimizer, choices=("sgd", "adam"))
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--train-count", type=int, default=d.train_count)
    t.add_argument("--test-count", type=int, default=d.test_count)
    t.add_argument("--bins", type=int, default=d.bins)
    t.add_argument("--out", default=d.out, help="metrics CSV path")
    t.add_argument("--archive", help="weight archive path (default: <out>.arcw)")
    t.set_defaults(func=cmd_train)

    dg = sub.add_parser("datagen", help="write the oriented-bars dataset manifest (and images)")
    dg.add_argument("--count", type=int, required=True)
    dg.add_argument("--seed", type=int, default=0)
    dg.add_argument("--bins", type=int, default=8)
    dg.add_argument("--out", required=True)
    dg.add_argument("--pgm", action="store_true")
    dg.set_defaults(func=cmd_datagen)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "input", None) is None and args.command == "estimate":
        args.input = 1024 if args.preset == "resnet50" else 32
    try:
        return args.func(args)
    except UsageError as exc:
        _note(f"arcconv {args.command}: error: {exc}")
        return EXIT_USAGE
    except archive.ArchiveFormatError as exc:
        _note(f"arcconv {args.command}: format error: {exc}")
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        _note(f"arcconv {args.command}: error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
