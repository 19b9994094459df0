"""``mstn`` command line: train, eval, bench and ablate.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
abort, 4 weight-file error. Data goes to stdout as JSON lines; diagnostics
go to stderr, one line per failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench as benchmod
from . import serialize
from .config import MstnConfig, TASKS, parse_pairs
from .data import MaskSpec, WindowSpec, fit_transform_minmax, load_csv, synth_classes, synth_sine
from .errors import ConfigError, DataError, MstnError, WeightsError
from .model import MSTN
from .tasks import (classify_config, evaluate_classify, evaluate_forecast, evaluate_impute, forecast_config,
                    impute_config, resolve_variants, run_ablation, run_classify, run_forecast, run_impute_ratio)
from .training import TrainConfig

log = logging.getLogger("mstn")

EXIT_OK = 0
OUT_FILES = ("weights.bin", "config.txt", "history.jsonl", "metrics.jsonl")
SEED_ENV = "MSTN_SEED"

# defaults of the built-in synthetic sets
SINE_LENGTH, SINE_DIM, SINE_COMPONENTS, SINE_PERIODS = 2000, 2, 2, (12, 48)
CLASSES_PER_CLASS, CLASSES_LENGTH, CLASSES_DIM = 100, 32, 2


# ------------------------------------------------------------------ arguments
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one diagnostic line instead of argparse's usage block
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--core", choices=("transformer", "bilstm"))
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="synth:sine, synth:classes or a CSV path")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic generators")
    p.add_argument("--no-header", action="store_true", help="CSV has no header row")
    p.add_argument("--timestamp-col", type=int, help="index of a CSV column to drop as timestamps")
    p.add_argument("--lookback", type=int, help="forecast lookback (default: seq_len)")
    p.add_argument("--horizon", type=int, help="forecast horizon (default: config horizon)")
    p.add_argument("--ratio", type=float, default=0.25, help="imputation mask ratio")
    p.add_argument("--mask-unit", choices=("cell", "timestep"), default="cell")
    p.add_argument("--inverse-metrics", action="store_true", help="score in original units")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mstn", description="MSTN time-series models: train, eval, bench, ablate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write it to --out")
    _common(p)
    _data_args(p)
    _train_args(p)
    p.add_argument("--variant", default="Full")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score saved weights; metrics go to stdout")
    _common(p)
    _data_args(p)
    p.add_argument("--run", help="directory written by train (weights.bin + config.txt)")
    p.add_argument("--weights", help="weight file (overrides --run)")

    p = sub.add_parser("bench", help="forward latency and weight-file size")
    _common(p)
    p.add_argument("--variant", default="Full")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--T", type=int, dest="length", help="sequence length (default: seq_len)")
    p.add_argument("--D", type=int, dest="dim", help="input features (default: input_dim)")
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--components", action="store_true", help="all six ablation variants")
    p.add_argument("--sweep", help="comma list of lengths, e.g. 64,128,256")

    p = sub.add_parser("ablate", help="train every ablation variant on the same data")
    _common(p)
    _data_args(p)
    _train_args(p)
    p.add_argument("--variants", default="all", help="'all' or a comma list")
    p.add_argument("--out", help="directory for metrics.jsonl")
    return parser


# ------------------------------------------------------------------- resolving
def resolve_config(args) -> MstnConfig:
    """Built-in defaults, then the config file, then flags, then ``MSTN_SEED``."""
    cfg = MstnConfig()
    if args.config:
        cfg = MstnConfig.load(args.config)
    overrides = parse_pairs("\n".join(args.set), cfg)
    for key in ("core", "variant", "task"):
        value = getattr(args, key, None)
        if value:
            overrides[key] = parse_pairs(f"{key}={value}", cfg)[key]
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            overrides["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg.replace(**overrides).validate()


def train_config(args, cfg: MstnConfig) -> TrainConfig:
    loss = {"classify": "focal", "forecast": "mse", "impute": "masked_mse"}[cfg.task]
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                       patience=args.patience, seed=cfg.seed, loss=loss).validate()


def load_data(args, task: str):
    """A scaled :class:`TimeSeriesDataset`, or a :class:`LabeledSet` for classification."""
    spec = args.data
    if task == "classify":
        if spec != "synth:classes":
            raise DataError(f"classification needs labeled data; only synth:classes is built in, got {spec!r}")
        return synth_classes(CLASSES_PER_CLASS, CLASSES_LENGTH, CLASSES_DIM, seed=args.data_seed)
    if spec == "synth:classes":
        raise DataError("synth:classes is a labeled set; use it with --task classify")
    if spec == "synth:sine":
        ds = synth_sine(SINE_COMPONENTS, SINE_LENGTH, SINE_DIM, SINE_PERIODS, seed=args.data_seed)
    elif spec.startswith("synth:"):
        raise DataError(f"unknown synthetic set {spec!r}; choose synth:sine or synth:classes")
    else:
        ds = load_csv(spec.removeprefix("csv:"), has_header=not args.no_header,
                      timestamp_col=args.timestamp_col)
    return fit_transform_minmax(ds)


def window_of(args, cfg: MstnConfig) -> WindowSpec:
    return WindowSpec(args.lookback or cfg.seq_len, args.horizon or cfg.horizon)


def task_config(args, cfg: MstnConfig, data) -> MstnConfig:
    if cfg.task == "forecast":
        return forecast_config(cfg, data, window_of(args, cfg))
    if cfg.task == "impute":
        return impute_config(cfg, data)
    return classify_config(cfg, data)


def evaluate(args, model: MSTN, data) -> list:
    cfg = model.cfg
    if cfg.task == "forecast":
        rec, base = evaluate_forecast(model, data, window_of(args, cfg), inverse=args.inverse_metrics)
    elif cfg.task == "impute":
        rec, base, _ = evaluate_impute(model, data, MaskSpec(args.ratio, cfg.seed, args.mask_unit),
                                       inverse=args.inverse_metrics)
    else:
        rec, base, _ = evaluate_classify(model, data, name=args.data)
    return [rec, base]


# -------------------------------------------------------------------- commands
def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_data(args, cfg.task)
    cfg = task_config(args, cfg, data)
    tcfg = train_config(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = []

    def on_epoch(rec):
        history.append(rec)
        log.info("epoch %d train %.6f val %.6f", rec.epoch, rec.train_loss, rec.val_loss)

    if cfg.task == "forecast":
        outcome = run_forecast(data, window_of(args, cfg), cfg, tcfg, on_epoch)
    elif cfg.task == "impute":
        outcome = run_impute_ratio(data, args.ratio, cfg, tcfg, args.mask_unit, on_epoch)
    else:
        outcome = run_classify(data, cfg, tcfg, name=args.data, on_epoch=on_epoch)
    records = evaluate(args, outcome.model, data) if args.inverse_metrics else outcome.records
    outcome.model.save(out / "weights.bin")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "history.jsonl").write_text("".join(r.to_json() + "\n" for r in history), encoding="utf-8")
    # wall-clock time would break byte-for-byte reproducibility of this file
    (out / "metrics.jsonl").write_text("".join(r.to_json(timing=False) + "\n" for r in records),
                                       encoding="utf-8")
    for r in records:
        print(r.to_json())
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.run and not (args.weights and args.config):
        raise ConfigError("eval needs --run DIR, or both --weights and --config")
    if args.run and not args.config:
        args.config = str(Path(args.run) / "config.txt")
    weights = args.weights or str(Path(args.run) / "weights.bin")
    cfg = resolve_config(args)
    data = load_data(args, cfg.task)
    cfg = task_config(args, cfg, data)
    try:
        arrays = serialize.load(weights)
    except OSError as exc:
        raise WeightsError(f"cannot read weights {weights}: {exc.strerror or exc}") from None
    model = MSTN(cfg)
    model.load_state(arrays)
    for r in evaluate(args, model, data):
        print(r.to_json(timing=False))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    changes = {}
    if args.length:
        changes["seq_len"] = args.length
    if args.dim:
        changes["input_dim"] = args.dim
    cfg = cfg.replace(**changes).validate()
    kw = dict(batch=args.batch, warmup=args.warmup, iters=args.iters, threads=args.threads)
    if args.sweep:
        try:
            lengths = [int(t) for t in args.sweep.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"--sweep expects comma-separated integers, got {args.sweep!r}") from None
        reports = list(benchmod.length_sweep(cfg, lengths, **kw).values())
    elif args.components:
        reports = benchmod.bench_components(cfg, **kw)
    else:
        reports = [benchmod.bench_model(cfg, **kw)]
    for r in reports:
        print(r.to_json())
    print(benchmod.component_table(reports), file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    variants = resolve_variants(args.variants)
    data = load_data(args, cfg.task)
    cfg = task_config(args, cfg, data)
    tcfg = train_config(args, cfg)
    table = run_ablation(data, cfg.task, cfg, tcfg, variants, window=window_of(args, cfg), ratio=args.ratio)
    lines = "".join(r.to_json(timing=False) + "\n" for r in table.records)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text(lines, encoding="utf-8")
    print(table.grid())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"mstn: ConfigError: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except MstnError as exc:
        print(f"mstn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        print(f"mstn {args.command}: DataError: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
