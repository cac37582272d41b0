"""Command-line entry point: ``pemmsc <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/format/config error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import data as data_mod
from . import harness
from .autodiff import NonFiniteError
from .data import DataError, DatasetFormatError
from .network import VARIANTS, CheckpointFormatError, ConfigurationError
from .objectives import check_constraint, records_to_csv

log = logging.getLogger("pemmsc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=default,
                        help="seed (overrides SEMCOM_SEED and the config)")
    parser.add_argument("--output-dir", default=default, help="artifact directory")
    parser.add_argument("--quiet", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="only warnings and errors on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pemmsc", description="Multimodal semantic communication simulator")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("train", "train one model and write checkpoint, metrics and figures")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset file (default: synthetic task from the config)")
    p.add_argument("--no-plots", action="store_true")

    for name, text in (("eval", "evaluate a checkpoint at one SNR"),
                       ("sweep-snr", "evaluate a checkpoint over an SNR grid")):
        p = add(name, text)
        p.add_argument("--checkpoint", help="default: <output-dir>/model.pmsc")
        p.add_argument("--data", help="dataset file (default: the run's test split)")
        p.add_argument("--trials", type=int)
        if name == "eval":
            p.add_argument("--snr", type=float, default=None,
                           help="SNR in dB; 'inf' for a noiseless link")
            p.add_argument("--K", type=int, dest="k_override")
        else:
            p.add_argument("--snr", type=_floats, default=list(harness.DEFAULT_SNR_GRID))
            p.add_argument("--no-plots", action="store_true")

    p = add("sweep-k", "train one model per K and sweep SNR for each")
    p.add_argument("--k", type=_ints, default=[16, 32, 64], dest="k_list")
    p.add_argument("--snr", type=_floats, default=list(harness.DEFAULT_SNR_GRID))
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--allow-small-k", action="store_true")
    p.add_argument("--no-plots", action="store_true")

    p = add("compare", "train several variants on identical data and compare over SNR")
    p.add_argument("--variants", type=_names, default=["PE-MMSC", "EndNet", "DeepEndNet"])
    p.add_argument("--snr", type=_floats, default=list(harness.DEFAULT_SNR_GRID))
    p.add_argument("--trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-plots", action="store_true")

    p = add("flops", "print transmitter FLOPs per variant")
    p.add_argument("--variants", type=_names, default=list(VARIANTS))
    p.add_argument("--K", type=int, default=64, dest="k")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of the table")

    p = add("synth", "write a synthetic dataset file")
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--separation", type=float)
    p.add_argument("--correlation", type=float)
    p.add_argument("--d-hsi", type=int, default=144)
    p.add_argument("--d-lidar", type=int, default=21)
    p.add_argument("--out", required=True)

    p = add("convert", "pack HSI/LiDAR/label CSV files into a dataset file")
    p.add_argument("--hsi", required=True)
    p.add_argument("--lidar", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--names")
    p.add_argument("--out", required=True)
    return parser


# -- command handlers ----------------------------------------------------------

def _config(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config, args.seed)
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    for attr, key in (("variant", "variant"), ("epochs", "epochs"), ("data", "data_path")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _warn_constraint(records, beta: float) -> None:
    for res in check_constraint(records, beta):
        if not res.passed:
            r = res.record
            log.warning("%s K=%d at %g dB: NMSE above beta=%g (hsi=%s, lidar=%s)",
                        r.variant, r.K, r.snr_db, beta, r.nmse_hsi, r.nmse_lidar)


def _write_sweep(records, path: Path, plot: bool, label_by: str = "variant") -> None:
    harness.atomic_write_text(path, records_to_csv(records))
    if plot:
        from .plots import sweep_figures

        for fig in sweep_figures(records, path, label_by):
            log.info("wrote %s", fig)
    _emit(records_to_csv(records))


def cmd_train(args) -> int:
    cfg = _config(args)
    arts = harness.train(cfg)
    if not args.no_plots and arts.history:
        from .plots import training_curve

        training_curve([r.epoch for r in arts.history], arts.train_loss,
                       [r.accuracy for r in arts.history], arts.output_dir / "training.png")
    last = arts.history[-1]
    log.info("checkpoint written to %s", arts.checkpoint)
    _emit(records_to_csv([last]))
    return EXIT_OK


def _checkpoint_context(args):
    """Checkpoint, config and evaluation set for eval/sweep-snr."""
    if args.config is None and args.checkpoint is not None:
        resolved = Path(args.checkpoint).parent / "config.resolved.json"
        if resolved.exists():
            args.config = str(resolved)
    cfg = _config(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "model.pmsc"
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    spec, params = harness.load_checkpoint(ckpt)
    if args.data is not None:
        ds = data_mod.load_dataset(args.data)
    else:
        _, ds = harness.prepare_data(cfg)
    trials = cfg.eval_trials if args.trials is None else args.trials
    return cfg, spec, params, ds, trials


def cmd_eval(args) -> int:
    cfg, spec, params, ds, trials = _checkpoint_context(args)
    snr = cfg.eval_snr_db if args.snr is None else args.snr
    rec = harness.evaluate_at(spec, params, ds, snr, trials, cfg.seed, cfg.channel(),
                              K_override=args.k_override)
    _warn_constraint([rec], cfg.beta)
    _emit(records_to_csv([rec]))
    return EXIT_OK


def cmd_sweep_snr(args) -> int:
    cfg, spec, params, ds, trials = _checkpoint_context(args)
    if any(math.isnan(s) for s in args.snr):
        raise ConfigurationError("SNR values must not be NaN")
    recs = harness.sweep_snr(spec, params, ds, args.snr, trials, cfg.seed, cfg.channel())
    _warn_constraint(recs, cfg.beta)
    _write_sweep(recs, Path(cfg.output_dir) / "sweep_snr.csv", not args.no_plots)
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    cfg = _config(args)
    recs = harness.sweep_k(cfg, args.k_list, args.snr, args.trials, args.allow_small_k)
    _warn_constraint(recs, cfg.beta)
    _write_sweep(recs, Path(cfg.output_dir) / "sweep_k.csv", not args.no_plots, label_by="K")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    recs = harness.compare_variants(cfg, args.variants, args.snr, args.trials)
    _warn_constraint(recs, cfg.beta)
    _write_sweep(recs, Path(cfg.output_dir) / "compare.csv", not args.no_plots)
    return EXIT_OK


def cmd_flops(args) -> int:
    overrides = {"K": args.k}
    if args.config is not None:
        cfg = _config(args)
        overrides.update(K=cfg.K, encoder_widths=cfg.encoder_widths,
                         decoder_widths=cfg.decoder_widths, d_hsi=cfg.d_hsi,
                         d_lidar=cfg.d_lidar, m=cfg.synth_classes)
    rows = harness.flops_report(args.variants, **overrides)
    if args.csv:
        specs = [harness.ModelSpec(variant=v, **overrides) for v, _ in rows]
        _emit(harness.flops_csv(specs))
    else:
        _emit(harness.format_flops_table(rows) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = harness.load_config(args.config, args.seed)
    ds = data_mod.synth_generate(
        args.classes, args.per_class, args.d_hsi, args.d_lidar,
        cfg.synth_separation if args.separation is None else args.separation, cfg.seed,
        cfg.synth_correlation if args.correlation is None else args.correlation,
        lidar_strength=cfg.synth_lidar_strength, nuisance_dims=cfg.synth_nuisance_dims,
        nuisance_scale=cfg.synth_nuisance_scale)
    data_mod.save_dataset(args.out, ds)
    log.info("wrote %d samples (%d classes) to %s", len(ds), ds.m, args.out)
    return EXIT_OK


def cmd_convert(args) -> int:
    ds = data_mod.convert_csv(args.hsi, args.lidar, args.labels, args.out, args.names)
    log.info("wrote %d samples (%d classes) to %s", len(ds), ds.m, args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep-snr": cmd_sweep_snr,
            "sweep-k": cmd_sweep_k, "compare": cmd_compare, "flops": cmd_flops,
            "synth": cmd_synth, "convert": cmd_convert}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except (harness.NumericAbort, NonFiniteError) as exc:
        print(f"pemmsc: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DatasetFormatError, DataError, CheckpointFormatError,
            OSError) as exc:
        print(f"pemmsc: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
