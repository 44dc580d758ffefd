"""Command line entry point: ``dprnet {train,eval,forecast,diagnose,gradcheck,synth}``.

Exit codes: 0 success, 1 invariant failure, 2 config error, 3 data error,
4 numeric error, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import DprNetModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATIONS, RunConfig, apply_ablation
from .data import RegimeSpec, Scaler, SeriesFrame, load_csv, make_regime_synthetic, save_csv, split
from .diagnostics import diagnose_frame, format_table, reports_to_csv, score_reports
from .errors import ConfigError, DataError, DprError
from .invariants import run_invariants
from .training import DataSplits, evaluate, predict, train

EXIT_OK = 0
EXIT_INVARIANT = 1

CHECKPOINT_NAME = "checkpoint.dprc"
EPOCH_LOG_NAME = "epochs.csv"
METRICS_NAME = "metrics.txt"

log = logging.getLogger("dprnet")


def _thread_limit():
    limit = os.environ.get("DPR_THREADS")
    if not limit:
        return contextlib.nullcontext()
    try:
        n = int(limit)
    except ValueError as exc:
        raise ConfigError(f"DPR_THREADS must be an integer, got {limit!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.replace(":", ",").split(","))
    except ValueError as exc:
        raise ConfigError(f"invalid split ratios {text!r}") from exc
    if len(parts) != 3:
        raise ConfigError(f"split needs three ratios, got {text!r}")
    total = sum(parts)
    # accept both 0.7,0.1,0.2 and 7:1:2
    return tuple(p / total for p in parts) if total > 1.0 + 1e-9 else parts


def write_flat(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in values.items()))


def _load_data(path: str | None) -> SeriesFrame:
    if not path:
        raise DataError("no data file given (use --data or [data] path)")
    return load_csv(path)


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    for name in args.ablate or ():
        config = apply_ablation(config, name)
    if args.seed is not None:
        config = config.set("seed", args.seed)
    if args.split:
        config = config.set("split", _parse_ratios(args.split))
    if args.epochs is not None:
        config = config.set("max_epochs", args.epochs)
    frame = _load_data(args.data or config["path"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    splits = DataSplits.from_frame(frame, config["split"])
    model = DprNetModel(config.model_config(frame.n_channels), seed=config["seed"])
    with (out / EPOCH_LOG_NAME).open("w") as fh:
        result = train(model, splits, config.train_config(), log_file=fh)

    val_mse, val_mae = evaluate(result.model, splits.val)
    test_mse, test_mae = evaluate(result.model, splits.test)
    save_checkpoint(
        out / CHECKPOINT_NAME,
        result.model,
        arrays={"scaler.mean": splits.scaler.mean, "scaler.std": splits.scaler.std},
        extras={"split": list(config["split"]), "channels": frame.channel_names},
    )
    (out / "config.ini").write_text(config.to_text())
    metrics = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "val_mse": val_mse,
        "val_mae": val_mae,
        "test_mse": test_mse,
        "test_mae": test_mae,
        "parameters": result.model.num_parameters(),
    }
    write_flat(out / METRICS_NAME, metrics)
    print(f"best epoch {result.best_epoch}: val_mse={val_mse:.6f} test_mse={test_mse:.6f} test_mae={test_mae:.6f}")
    return EXIT_OK


def _checkpoint_scaler(ckpt) -> Scaler | None:
    if "scaler.mean" in ckpt.arrays:
        return Scaler(ckpt.arrays["scaler.mean"], ckpt.arrays["scaler.std"])
    return None


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    frame = _load_data(args.data)
    model = ckpt.model
    if frame.n_channels != model.config.channels:
        raise ConfigError(f"channel axis: checkpoint expects {model.config.channels} channels, data has {frame.n_channels}")
    ratios = _parse_ratios(args.split_ratios) if args.split_ratios else tuple(ckpt.extras.get("split", (0.7, 0.1, 0.2)))
    parts = dict(zip(("train", "val", "test"), split(frame, ratios)))
    if args.split not in parts:
        raise ConfigError(f"unknown split {args.split!r}")
    scaler = _checkpoint_scaler(ckpt) or Scaler.fit(parts["train"].values)
    mse, mae = evaluate(model, scaler.transform(parts[args.split].values))
    metrics = {"split": args.split, "mse": mse, "mae": mae}
    if args.out:
        write_flat(Path(args.out), metrics)
    print(f"mse = {mse!r}\nmae = {mae!r}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    cfg = model.config
    frame = _load_data(args.data)
    if frame.n_channels != cfg.channels:
        raise ConfigError(f"channel axis: checkpoint expects {cfg.channels} channels, input has {frame.n_channels}")
    if frame.length < cfg.lookback:
        raise DataError(f"forecast input needs at least {cfg.lookback} rows, got {frame.length}")
    scaler = _checkpoint_scaler(ckpt) or Scaler(np.zeros(cfg.channels), np.ones(cfg.channels))
    window = scaler.transform(frame.values[-cfg.lookback :])[None]
    forecast = scaler.inverse(predict(model, window)[0])
    result = SeriesFrame(forecast, frame.channel_names)
    if args.out:
        save_csv(result, args.out)
    else:
        print(",".join(frame.channel_names))
        for row in forecast:
            print(",".join(repr(float(v)) for v in row))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    reports = []
    for path in args.paths:
        frame = load_csv(path)
        reports.append(diagnose_frame(frame, Path(path).stem, window=args.window))
    reports = score_reports(reports)
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    print(format_table(reports))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_invariants(seed=args.seed, fault_gamma=args.fault_gamma)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_INVARIANT
    print("all invariants passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = RegimeSpec(channels=args.channels)
    frame = make_regime_synthetic(args.seed if args.seed is not None else 0, args.length, spec)
    save_csv(frame, args.out)
    np.savetxt(Path(args.out).with_suffix(".regimes.txt"), frame.meta["regime"], fmt="%d")
    print(f"wrote {frame.length} rows x {frame.n_channels} channels to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dprnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train DPRNet on a CSV series")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", help="train/val/test ratios, e.g. 0.7,0.1,0.2 or 6:2:2")
    p.add_argument("--epochs", type=int, help="override [train] max_epochs")
    p.add_argument("--ablate", action="append", choices=ABLATIONS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="MSE/MAE of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--split-ratios")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast the horizon after the last lookback rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("diagnose", help="ADF p-value, spectral entropy, VoV and composite score")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("gradcheck", help="run the invariant battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fault-gamma", type=float, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the regime-switch synthetic series as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--length", type=int, default=2048)
    p.add_argument("--channels", type=int, default=1)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except DprError as exc:
        print(f"error [{_category(exc)}]: {exc}", file=sys.stderr)
        return exc.exit_code


def _category(exc: DprError) -> str:
    from .errors import CheckpointError, NumericError

    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, DataError):
        return "data"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    return "error"


if __name__ == "__main__":
    sys.exit(main())
