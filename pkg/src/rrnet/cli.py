"""Command-line entry point: ``rrnet <subcommand> ...``.

Exit status is 0 on success, 1 on a validation error (bad arguments,
config, curves, unknown layer ...) and 2 on an I/O or file-format error.
Diagnostics go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import corpus as bundled
from .codec import encode_frame
from .config import ConfigError, RunConfig, load_config
from .formats import (
    FormatError,
    atomic_write,
    read_partition,
    read_pgm,
    read_resi,
    write_partition,
    write_pgm,
    write_resi,
)
from .model import ModelConfig, Variant
from .weights import load_weights, save_weights

log = logging.getLogger("rrnet")

COMMANDS = (
    "encode",
    "dataset",
    "train",
    "finetune",
    "apply",
    "eval",
    "bdrate",
    "crossqp",
    "dump-features",
    "gradcheck",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def weights_name(variant: str, qp: int) -> str:
    return f"{variant}_q{qp}.rrnw"


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _images(spec: str) -> dict:
    """``train`` / ``test`` / ``all`` for the bundled corpus, else a directory of PGMs."""
    loaders = {"train": bundled.train_images, "test": bundled.test_images, "all": bundled.all_images}
    if spec in loaders:
        return loaders[spec]()
    path = Path(spec)
    if path.is_dir():
        return {p.stem: read_pgm(p) for p in sorted(path.glob("*.pgm"))}
    return {path.stem: read_pgm(path)}


def _write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_encode(args) -> int:
    cfg = _config(args)
    frame = read_pgm(args.input)
    triple = encode_frame(frame, args.qp, lossless=args.lossless, var_threshold=cfg.var_threshold)
    out = Path(args.out_dir)
    stem = f"{Path(args.input).stem}.q{args.qp}"
    write_pgm(out / f"{stem}.recon.pgm", triple.reconstruction)
    write_resi(out / f"{stem}.resi", triple.residual)
    write_partition(out / f"{stem}.part.txt", triple.partition)
    line = f"rate_proxy {triple.rate_proxy!r}\n"
    _write_text(out / f"{stem}.rate.txt", line)
    sys.stdout.write(line)
    return 0


def cmd_dataset(args) -> int:
    from .trainer import build_dataset

    cfg = _config(args)
    qps = args.qps or list(cfg.qps)
    manifest = build_dataset(
        _images(args.images),
        qps,
        args.out_dir,
        stride=args.stride or cfg.patch_stride,
        patch_size=cfg.patch_size,
        var_threshold=cfg.var_threshold,
    )
    print(f"{len(manifest)} records -> {Path(args.out_dir) / 'manifest.tsv'} (skipped {manifest.skipped})")
    return 0


def _history_outputs(out: Path, history, title: str) -> None:
    from . import plotting

    rows = "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history))
    _write_text(out.with_suffix(".loss.csv"), rows)
    if history:
        plotting.loss_curve(history, out.with_suffix(".loss.png"), title)


def cmd_train(args) -> int:
    from .trainer import DatasetManifest, LRSchedule, train

    cfg = _config(args)
    manifest = DatasetManifest.load(args.manifest)
    manifest.validate()
    qps = manifest.qps
    if len(qps) != 1:
        raise ValueError(f"training manifest must hold one qp, got {sorted(qps)}")
    config = ModelConfig(
        Variant[args.variant],
        cfg.stem_channels,
        cfg.block_channels,
        cfg.edsr_channels,
        qp_tag=next(iter(qps)),
    )
    epochs = args.epochs if args.epochs is not None else cfg.epochs
    schedule = LRSchedule(cfg.base_lr, cfg.lr_gamma, cfg.lr_interval, cfg.total_epochs)
    result = train(
        config,
        manifest,
        epochs,
        batch=cfg.batch_size,
        seed=args.seed if args.seed is not None else cfg.seed,
        schedule=schedule,
        weight_decay=cfg.weight_decay,
    )
    out = Path(args.out)
    save_weights(result.model, out)
    _history_outputs(out, result.history, f"{args.variant} QP{config.qp_tag}")
    print(f"{result.steps} steps, final loss {result.history[-1] if result.history else math.nan!r}")
    return 0


def cmd_finetune(args) -> int:
    from .trainer import DatasetManifest, fine_tune

    cfg = _config(args)
    base = load_weights(args.base)
    manifest = DatasetManifest.load(args.manifest)
    manifest.validate()
    result = fine_tune(
        base,
        manifest,
        epochs=args.epochs if args.epochs is not None else cfg.finetune_epochs,
        batch=cfg.batch_size,
        seed=cfg.seed,
        lr=cfg.base_lr,
        weight_decay=cfg.weight_decay,
    )
    out = Path(args.out)
    save_weights(result.model, out)
    _history_outputs(out, result.history, f"fine-tune to QP{result.model.config.qp_tag}")
    print(f"{result.steps} steps -> qp_tag {result.model.config.qp_tag}")
    return 0


def cmd_apply(args) -> int:
    from .codec import CodedTriple, Frame
    from .evaluate import apply_filter, format_psnr, psnr

    cfg = _config(args)
    model = load_weights(args.weights)
    if args.input:
        triple = encode_frame(read_pgm(args.input), args.qp, var_threshold=cfg.var_threshold)
    else:
        if not (args.recon and args.residual):
            raise ValueError("apply needs --in/--qp or --recon and --residual")
        recon = read_pgm(args.recon)
        residual = read_resi(args.residual)
        if args.partition:
            partition = read_partition(args.partition)
        elif model.config.variant is Variant.PARTITION_RECON:
            raise ValueError("PARTITION_RECON needs --partition")
        else:
            partition = None
        triple = CodedTriple(Frame(recon.plane.copy()), recon, residual, partition, model.config.qp_tag, 0.0)
    filtered = apply_filter(model, triple, overlap=cfg.tile_overlap)
    write_pgm(args.out, filtered)
    if args.input:
        print(
            f"psnr_recon {format_psnr(psnr(triple.original, triple.reconstruction))} "
            f"psnr_filtered {format_psnr(psnr(triple.original, filtered))}"
        )
    return 0


def _load_models(weights_dir: Path, variants, qps) -> dict:
    models = {}
    for v in variants:
        for qp in qps:
            path = weights_dir / weights_name(v, qp)
            model = load_weights(path)
            if model.config.variant.name != v or model.config.qp_tag != qp:
                raise ValueError(f"{path} holds {model.config.variant.name} at qp {model.config.qp_tag}")
            models[(v, qp)] = model
    return models


def cmd_eval(args) -> int:
    from . import plotting
    from .evaluate import ablation_report

    cfg = _config(args)
    qps = args.qps or list(cfg.qps)
    for v in args.variants:
        Variant[v]
    models = _load_models(Path(args.weights_dir), args.variants, qps)
    report = ablation_report(_images(args.images), models, qps, args.variants, overlap=cfg.tile_overlap)
    out = Path(args.out_dir)
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "report.txt", report.to_text())
    plotting.rd_curves(report, out / "rd_curves.png")
    plotting.gain_bars(report, out / "gains.png")
    sys.stdout.write(report.to_text())
    return 0


def cmd_bdrate(args) -> int:
    from .evaluate import bd_rate, read_rd_csv

    value = bd_rate(read_rd_csv(args.anchor), read_rd_csv(args.test))
    print(f"{value:.2f}")
    return 0


def cmd_crossqp(args) -> int:
    from . import plotting
    from .evaluate import cross_qp_matrix, mean_abs_by_qp_gap, write_matrix_csv

    cfg = _config(args)
    qps = args.qps or list(cfg.qps)
    loaded = _load_models(Path(args.weights_dir), [args.variant], qps)
    models = {qp: loaded[(args.variant, qp)] for qp in qps}
    matrix = cross_qp_matrix(models, _images(args.images), qps, overlap=cfg.tile_overlap)
    out = Path(args.out_dir)
    text = write_matrix_csv(matrix, qps)
    _write_text(out / "cross_qp.csv", text)
    plotting.cross_qp_heatmap(matrix, qps, out / "cross_qp.png")
    sys.stdout.write(text)
    for gap, value in mean_abs_by_qp_gap(matrix, qps).items():
        print(f"mean |dPSNR| at |dQP|={gap}: {value:.4f}")
    return 0


def cmd_dump_features(args) -> int:
    from .evaluate import export_feature_maps

    cfg = _config(args)
    model = load_weights(args.weights)
    triple = encode_frame(read_pgm(args.input), args.qp, var_threshold=cfg.var_threshold)
    paths = export_feature_maps(model, triple, args.layer, args.out_dir)
    print(f"{len(paths)} feature maps -> {args.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run

    worst, results, seconds = run(seed=args.seed)
    for name, err in results.items():
        print(f"{name:40s} {err:.3e}", file=sys.stderr)
    print(f"max relative error {worst:.3e} ({seconds:.1f}s)")
    return 0 if worst <= TOLERANCE else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rrnet", description="Residual-guided CNN in-loop filter toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="key = value run configuration file")
        return sp

    variants = [v.name for v in Variant]

    sp = add("encode", cmd_encode, "code a PGM frame with the toy intra codec")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--qp", type=int, required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--lossless", action="store_true")

    sp = add("dataset", cmd_dataset, "encode images and tile 64x64 training patches")
    sp.add_argument("--images", default="train", help="train|test|all, a PGM file or a directory")
    sp.add_argument("--qps", type=int, nargs="+")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--out-dir", required=True)

    sp = add("train", cmd_train, "train a model from scratch on a single-qp manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--variant", choices=variants, default="RRNET")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, "fine-tune trained weights on another qp")
    sp.add_argument("--base", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)

    sp = add("apply", cmd_apply, "filter one frame")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--in", dest="input", help="original PGM; coded at --qp first")
    sp.add_argument("--qp", type=int)
    sp.add_argument("--recon")
    sp.add_argument("--residual")
    sp.add_argument("--partition")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "BD-rate / PSNR report of variants against the unfiltered codec")
    sp.add_argument("--weights-dir", required=True, help="holds <VARIANT>_q<QP>.rrnw files")
    sp.add_argument("--variants", nargs="+", default=["RRNET"], choices=variants)
    sp.add_argument("--images", default="test")
    sp.add_argument("--qps", type=int, nargs="+")
    sp.add_argument("--out-dir", required=True)

    sp = add("bdrate", cmd_bdrate, "BD-rate between two rate,psnr CSV curves")
    sp.add_argument("--anchor", required=True)
    sp.add_argument("--test", required=True)

    sp = add("crossqp", cmd_crossqp, "cross-QP ΔPSNR matrix of per-qp models")
    sp.add_argument("--weights-dir", required=True)
    sp.add_argument("--variant", default="RRNET", choices=variants)
    sp.add_argument("--images", default="test")
    sp.add_argument("--qps", type=int, nargs="+")
    sp.add_argument("--out-dir", required=True)

    sp = add("dump-features", cmd_dump_features, "export one layer's activations as PGMs")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--qp", type=int, required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every op and RRNet")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"rrnet {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"rrnet {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
