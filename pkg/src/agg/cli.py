"""Command-line entry point: ``agg <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on data or configuration
errors, which are reported on stderr as a single ``error: <Kind>: <message>``
line.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from agg.checkpoint import load_checkpoint
from agg.config import RunConfig
from agg.errors import AGGError, ConfigurationError
from agg.evaluation import (agg_predictor, evaluate_imputation, evaluate_prediction,
                            mean_predictor, sweep_augmentation, write_sweep_csv)
from agg.model import count_parameters, parameter_breakdown
from agg.pipeline import (Dataset, PipelineConfig, Schema, build_query_samples, load_csv,
                          prepare, read_key_values, write_csv)
from agg.synthetic import SyntheticConfig, generate_synthetic
from agg.training import model_config_for, predict, train

log = logging.getLogger("agg")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def env_seed(default: int = 0) -> int:
    raw = os.environ.get("AGG_SEED")
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"AGG_SEED must be an integer, got {raw!r}") from None


def _run_config(args) -> RunConfig:
    """Config file, then AGG_SEED when no seed is set, then explicit flags."""
    overrides = dict(args.set or [])
    for key in ("data", "schema", "seed", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    file_values = {}
    if args.config is not None:
        file_values = read_key_values(args.config)
    if "seed" not in overrides and "seed" not in file_values:
        overrides["seed"] = str(env_seed())
    return RunConfig.load(args.config, overrides)


def _load_data(run: RunConfig) -> Dataset:
    if run.data is None:
        raise ConfigurationError("no data file: pass --data or set data = <path> in the config")
    return load_csv(run.data, run.schema)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# subcommands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else env_seed()
    cfg = SyntheticConfig(channels=args.channels, horizon=args.horizon, noise=args.noise,
                          rate=args.rate, sampling=args.sampling, seed=seed)
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    write_csv(ds, out)
    ds.schema.write(out.with_suffix(".schema"))
    print(f"wrote {len(ds)} observations to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    run.write(out / "config.resolved")
    ds = _load_data(run)
    extra = {"data": run.data, "schema": run.schema}
    ckpt, metrics = train(ds, run.pipeline, run.model, run.train, out_dir=out, echo=not args.quiet,
                          extra=extra)
    cfg = ckpt.model_config
    print(f"parameters {count_parameters(cfg)} best_epoch {metrics.best_epoch} "
          f"checkpoint {out / 'best.ckpt'}")
    return 0


def _read_queries(path: Path, schema: Schema, vocabs) -> Dataset:
    qschema = Schema(time=schema.time, discrete=schema.discrete, continuous=schema.continuous,
                     measurements=(), series=schema.series)
    return load_csv(path, qschema, vocabs=vocabs, grow=False)


def cmd_impute(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    schema = ckpt.schema or Schema()
    data_path = args.data or ckpt.extra.get("data")
    if data_path is None:
        raise ConfigurationError("no input data: pass --data")
    raw = load_csv(data_path, schema, vocabs=ckpt.vocabs, grow=False).observed()
    inputs = ckpt.stats.apply(raw).sorted()
    queries = _read_queries(Path(args.targets), schema, ckpt.vocabs)
    q_std = queries.with_values(t=(queries.t - ckpt.stats.time_offset) / ckpt.stats.time_scale)
    samples = build_query_samples(inputs, q_std, ckpt.model_config.context_length)
    pred = ckpt.stats.destandardize_y(predict(ckpt.model(), samples), queries.disc)
    with Path(args.targets).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header, body = rows[0], rows[1:]
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + list(schema.measurements))
        for row, p in zip(body, pred):
            w.writerow(row + [repr(float(v)) for v in p])
    print(f"wrote {len(body)} predictions to {out}")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data_path = args.data or ckpt.extra.get("data")
    if data_path is None:
        raise ConfigurationError("no input data: pass --data")
    pcfg = PipelineConfig(**ckpt.extra.get("pipeline", {}))
    raw = load_csv(data_path, ckpt.schema, vocabs=ckpt.vocabs, grow=False)
    data = prepare(raw, pcfg)
    report = evaluate_prediction(ckpt.model(), data, args.horizons, stride=args.stride,
                                 name=Path(data_path).stem)
    print(report.table(key_name="horizon"))
    if args.out:
        report.to_csv(args.out, key_name="horizon")
    return 0


def cmd_evaluate(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    run.write(out / "config.resolved")
    ds = _load_data(run)
    name = Path(run.data).stem
    mcfg = model_config_for(ds, run.model, run.pipeline, "regression")
    seeds = args.seeds if args.seeds is not None else [run.train.seed]
    report = evaluate_imputation(ds, args.r_grid, seeds, mean_predictor, run.pipeline, "mean")
    if not args.baseline_only:
        agg = evaluate_imputation(ds, args.r_grid, seeds, agg_predictor(mcfg, run.train),
                                  run.pipeline, name)
        report.rows = agg.rows + report.rows
        report.details = agg.details + report.details
    report.to_csv(out / "report.csv")
    print(report.table())
    return 0


def cmd_sweep(args) -> int:
    run = _run_config(args)
    out = _out_dir(args)
    run.write(out / "config.resolved")
    ds = _load_data(run)
    L = run.pipeline.context_length
    strides = args.strides or sorted({L, max(1, L // 2), max(1, L // 5), max(1, L // 10)},
                                     reverse=True)
    points = sweep_augmentation(ds, strides, run.pipeline, run.model, run.train)
    write_sweep_csv(points, out / "sweep.csv")
    print(f"{'stride':>6} {'factor':>8} {'samples':>8} {'val_rmse':>10}")
    for p in points:
        print(f"{p.stride:>6} {p.factor:>8.2f} {p.samples:>8} {p.val_rmse:>10.4f}")
    return 0


def cmd_params(args) -> int:
    run = _run_config(args)
    cfg = replace(run.model, d_y=args.d_y, vocab_sizes=tuple(args.vocab or ()),
                  n_continuous=args.continuous)
    for name, n in parameter_breakdown(cfg).items():
        print(f"{name:<24} {n:>9}")
    print(f"{'total':<24} {count_parameters(cfg):>9}")
    return 0


# parser -----------------------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--data", help="observation CSV (overrides the config)")
    p.add_argument("--schema", help="schema sidecar (default: <data>.schema if present)")
    p.add_argument("--seed", type=int, help="seed (default: config, then AGG_SEED, then 0)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("--out", default="run", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agg", description="Asynchronous graph generator: "
                                     "imputation and prediction for irregular multichannel series.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic multichannel CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--horizon", type=float, default=1250.0)
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--sampling", choices=("poisson", "regular"), default="poisson")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="mask, split and train; writes best.ckpt and metrics.jsonl")
    _add_run_options(p)
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="predict measurements at query times and channels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True, help="CSV with the time and channel columns")
    p.add_argument("--data", help="input observations (default: the training data)")
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("predict", help="forecast RMSE per horizon against the mean baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizons", type=_floats, default=[1.0, 2.0, 3.0, 4.0])
    p.add_argument("--data")
    p.add_argument("--stride", type=int)
    p.add_argument("--out", help="report CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="imputation RMSE/MAE over a grid of removal rates")
    _add_run_options(p)
    p.add_argument("--r-grid", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--baseline-only", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="validation RMSE against the stride augmentation factor")
    _add_run_options(p)
    p.add_argument("--strides", type=_ints)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("params", help="parameter count and per-block breakdown")
    p.add_argument("--config")
    p.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE")
    p.add_argument("--d-y", type=int, default=1)
    p.add_argument("--vocab", type=_ints, help="comma-separated vocabulary sizes")
    p.add_argument("--continuous", type=int, default=0)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AGGError, OSError) as exc:
        kind = type(exc).__name__
        message = " ".join(str(exc).split())
        print(f"error: {kind}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
