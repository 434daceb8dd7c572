"""Mean baseline, imputation / prediction protocols and the augmentation sweep."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from agg.metrics import auc, mae, rmse
from agg.model import AGG, ModelConfig
from agg.pipeline import (Dataset, PipelineConfig, PreparedData, Sample, SampleSet, Stats,
                          augmentation_factor, build_samples, prepare, window_starts, _series_bounds)
from agg.synthetic import SyntheticConfig, generate_synthetic, synthetic_truth
from agg.training import TrainConfig, fit, model_config_for, predict

__all__ = [
    "EvalReport", "SyntheticConfig", "auc", "evaluate_imputation", "evaluate_prediction",
    "generate_synthetic", "mae", "mean_baseline", "mean_baseline_predict", "rmse",
    "sweep_augmentation", "synthetic_truth",
]

log = logging.getLogger(__name__)


# baseline --------------------------------------------------------------------

def mean_baseline(sample: Sample, global_mean: float | np.ndarray = 0.0) -> np.ndarray:
    """Mean of same-channel inputs, else of all inputs, else ``global_mean``."""
    if not sample.inputs:
        return np.atleast_1d(np.asarray(global_mean, dtype=np.float64))
    same = [o.y for o in sample.inputs if o.c_disc == sample.target.c_disc]
    pool = same if same else [o.y for o in sample.inputs]
    return np.mean(np.stack(pool), axis=0)


def mean_baseline_predict(samples: SampleSet, global_mean: float | np.ndarray = 0.0) -> np.ndarray:
    """Vectorised :func:`mean_baseline` over a sample set."""
    out = np.zeros((len(samples), samples.inputs.d_y))
    if len(samples) == 0:
        return out
    b = samples.batch()
    same = b.mask & np.all(b.disc == b.g_disc[:, None, :], axis=-1)
    for weights, rows in ((same, same.any(axis=1)), (b.mask, ~same.any(axis=1))):
        w = weights[rows].astype(np.float64)
        out[rows] = np.einsum("bl,bld->bd", w, b.y[rows]) / w.sum(axis=1, keepdims=True)
    empty = ~b.mask.any(axis=1)
    out[empty] = global_mean
    return out


# reports ---------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list[tuple[str, str, str, float]] = field(default_factory=list)
    details: list[dict] = field(default_factory=list)

    def add(self, dataset: str, key, metric: str, value: float) -> None:
        self.rows.append((dataset, str(key), metric, float(value)))

    def get(self, key, metric: str, dataset: str | None = None) -> float:
        for d, k, m, v in self.rows:
            if k == str(key) and m == metric and (dataset is None or d == dataset):
                return v
        raise KeyError((key, metric))

    def to_csv(self, path: str | Path | None = None, key_name: str = "r") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", key_name, "metric", "value"])
        for d, k, m, v in self.rows:
            w.writerow([d, k, m, repr(v)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def table(self, key_name: str = "r") -> str:
        lines = [f"{'dataset':<12} {key_name:>8} {'metric':<10} {'value':>10}"]
        for d, k, m, v in self.rows:
            lines.append(f"{d:<12} {k:>8} {m:<10} {v:>10.4f}")
        return "\n".join(lines)


# imputation ----------------------------------------------------------------

Predictor = Callable[[PreparedData, int], np.ndarray]


def mean_predictor(data: PreparedData, seed: int) -> np.ndarray:
    return mean_baseline_predict(data.val, 0.0)


def agg_predictor(mcfg: ModelConfig, tcfg: TrainConfig) -> Predictor:
    """Train a fresh model per cell and predict its validation targets."""

    def run(data: PreparedData, seed: int) -> np.ndarray:
        cfg = model_config_for(data.inputs, mcfg, PipelineConfig(context_length=data.train.L,
                                                                 stride=1), "regression")
        model = AGG(cfg, seed=seed)
        best, _, _ = fit(model, data.train, data.val, tcfg.replace(seed=seed), data.stats)
        model.params.load_state(best)
        return predict(model, data.val)

    return run


def evaluate_imputation(dataset: Dataset, r_grid: Sequence[float], seeds: Sequence[int],
                        predictor: Predictor, pcfg: PipelineConfig,
                        name: str = "dataset") -> EvalReport:
    """RMSE and MAE (standardized units, averaged over seeds) for each removal rate."""
    report = EvalReport()
    for r in r_grid:
        per_seed = []
        for seed in seeds:
            data = prepare(dataset, pcfg.replace(removal_rate=r, seed=seed))
            if len(data.val) == 0:
                log.warning("r=%s seed=%s: no validation samples", r, seed)
                continue
            pred = predictor(data, seed)
            res = {"rmse": rmse(pred, data.val.y_target), "mae": mae(pred, data.val.y_target)}
            per_seed.append(res)
            report.details.append({"r": r, "seed": seed, **res, "n": len(data.val)})
        for metric in ("rmse", "mae"):
            vals = [d[metric] for d in per_seed]
            report.add(name, r, metric, float(np.mean(vals)) if vals else float("nan"))
    return report


# prediction ----------------------------------------------------------------

@dataclass
class ForecastSamples:
    samples: SampleSet
    horizon: float


def build_forecast_samples(inputs: Dataset, stats: Stats, L: int, stride: int, horizon: float,
                           truth: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                           future: Dataset | None = None, tolerance: float = 0.5) -> SampleSet:
    """Queries ``horizon`` raw time units after each window's last node.

    ``inputs`` is standardized and time-sorted. Ground truth comes from
    ``truth(channel, raw_t)`` (raw units, standardized here), or else from
    ``future`` observations (standardized) within ``tolerance`` raw units of
    the query time; windows with no target are skipped.
    """
    ws, wl, tau, gd, gc, tt, yt = [], [], [], [], [], [], []
    channels = np.unique(inputs.disc, axis=0)
    chan_cont = {tuple(c): inputs.cont[np.all(inputs.disc == c, axis=1)][0] for c in channels}
    h_std = horizon / stats.time_scale
    tol_std = tolerance / stats.time_scale
    t_max = inputs.t.max() if future is None else max(inputs.t.max(), future.t.max())
    for a, b in _series_bounds(inputs):
        for s in window_starts(b - a, L, stride):
            lo, hi = a + s, min(a + s + L, b)
            t_end = inputs.t[hi - 1]
            t_q = t_end + h_std
            if t_q > t_max + 1e-12:
                continue
            if truth is not None:
                for c in channels:
                    raw_t = t_q * stats.time_scale + stats.time_offset
                    y_raw = np.atleast_1d(truth(c[0] if len(c) else 0, raw_t))
                    mean, std = stats.channel_moments(c[None, :])
                    ws.append(lo), wl.append(hi - lo), tau.append(t_end - t_q)
                    gd.append(c), gc.append(chan_cont[tuple(c)]), tt.append(t_q)
                    yt.append((y_raw - mean[0]) / std[0])
            else:
                near = np.flatnonzero(np.abs(future.t - t_q) <= tol_std)
                for j in near:
                    ws.append(lo), wl.append(hi - lo), tau.append(t_end - future.t[j])
                    gd.append(future.disc[j]), gc.append(future.cont[j]), tt.append(future.t[j])
                    yt.append(future.y[j])
    n = len(ws)
    m, k = inputs.disc.shape[1], inputs.cont.shape[1]
    return SampleSet(inputs, L, np.array(ws, dtype=np.int64), np.array(wl, dtype=np.int64),
                     np.array(tau), np.array(gd, dtype=np.int64).reshape(n, m),
                     np.array(gc, dtype=np.float64).reshape(n, k), np.array(tt),
                     np.array(yt, dtype=np.float64).reshape(n, inputs.d_y))


def evaluate_prediction(model: AGG, data: PreparedData, horizons: Sequence[float],
                        truth=None, future: Dataset | None = None, stride: int | None = None,
                        name: str = "dataset") -> EvalReport:
    """RMSE per horizon for the model and the mean baseline (metric ``rmse_mean``)."""
    report = EvalReport()
    L = data.train.L
    stride = stride or L
    if future is None and truth is None:
        future = Dataset.concat([data.train_targets, data.val_targets]).sorted()
    for h in horizons:
        fs = build_forecast_samples(data.inputs, data.stats, L, stride, h, truth, future)
        if len(fs) == 0:
            log.warning("horizon %s exceeds the data extent; skipped", h)
            continue
        pred = predict(model, fs)
        report.add(name, h, "rmse", rmse(pred, fs.y_target))
        report.add(name, h, "rmse_mean", rmse(mean_baseline_predict(fs), fs.y_target))
        report.details.append({"horizon": h, "n": len(fs)})
    return report


# augmentation sweep ----------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    stride: int
    factor: float
    val_rmse: float
    samples: int


def sweep_augmentation(dataset: Dataset, strides: Sequence[int], pcfg: PipelineConfig,
                       mcfg: ModelConfig, tcfg: TrainConfig) -> list[SweepPoint]:
    """Train one model per stride (same seed, epochs and validation set); sorted by factor."""
    points = []
    for stride in strides:
        cfg = pcfg.replace(stride=int(stride))
        data = prepare(dataset, cfg)
        factor = augmentation_factor(data.inputs, data.train_targets, cfg.context_length, cfg.stride)
        model = AGG(model_config_for(dataset, mcfg, cfg, "regression"), seed=tcfg.seed)
        best, _, metrics = fit(model, data.train, data.val, tcfg, data.stats)
        model.params.load_state(best)
        val = rmse(predict(model, data.val), data.val.y_target)
        points.append(SweepPoint(int(stride), factor, val, len(data.train)))
    return sorted(points, key=lambda p: (p.factor, -p.stride))


def write_sweep_csv(points: Sequence[SweepPoint], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stride", "factor", "val_rmse", "samples"])
        for p in points:
            w.writerow([p.stride, repr(p.factor), repr(p.val_rmse), p.samples])
