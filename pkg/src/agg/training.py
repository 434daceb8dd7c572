"""Self-supervised training loop, losses and the learning-rate schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from agg.checkpoint import Checkpoint, save_checkpoint
from agg.errors import ConfigurationError, DataError, TrainingDivergenceError
from agg.metrics import auc, mae, rmse
from agg.model import AGG, ModelConfig
from agg.numerics import ops
from agg.numerics.optim import AdamState, adam_step, clip_global_norm, global_norm
from agg.numerics.rng import make_rng
from agg.numerics.tensor import Tape, Tensor, backward
from agg.pipeline import Dataset, PipelineConfig, SampleSet, Stats, prepare

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr_start: float = 0.005
    lr_end: float = 0.001
    clip: float = 1.0
    batch_size: int = 128
    seed: int = 0
    task: str = "regression"
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError(
                f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.clip <= 0 or self.batch_size < 1:
            raise ConfigurationError("clip must be positive and batch_size >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def mse_loss(pred, target) -> Tensor:
    return ops.mean(ops.square(ops.sub(pred, target)))


def bce_loss(prob, label) -> Tensor:
    """Mean binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    p = ops.clip(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    ll = ops.add(ops.mul(ops.log(p), y), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - y))
    return ops.mul(ops.mean(ll), -1.0)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear annealing from ``lr_start`` at epoch 0 to ``lr_end`` at ``epochs``."""
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    frac = min(epoch / cfg.epochs, 1.0) if cfg.epochs > 0 else 1.0
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    samples: int
    steps: int
    val_rmse: float | None = None
    val_mae: float | None = None
    val_auc: float | None = None
    val_mae_native: float | None = None
    wall: float = field(default=0.0, compare=False)

    def line(self) -> str:
        """Deterministic JSON record (wall-clock excluded)."""
        d = asdict(self)
        d.pop("wall")
        return json.dumps(d, sort_keys=True)


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    clip_norms: list[float] = field(default_factory=list, repr=False)

    def lines(self) -> list[str]:
        return [r.line() for r in self.records]


def evaluate(model: AGG, samples: SampleSet, batch_size: int = 256,
             stats: Stats | None = None) -> dict[str, float]:
    """Validation metrics in eval mode (no dropout)."""
    if len(samples) == 0:
        return {}
    preds = predict(model, samples, batch_size)
    if model.config.task == "classification":
        p = np.clip(preds, BCE_CLAMP, 1.0 - BCE_CLAMP)
        y = samples.label
        bce = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
        return {"auc": auc(preds, samples.label), "bce": bce}
    out = {"rmse": rmse(preds, samples.y_target), "mae": mae(preds, samples.y_target)}
    if stats is not None:
        native_p = stats.destandardize_y(preds, samples.g_disc)
        native_t = stats.destandardize_y(samples.y_target, samples.g_disc)
        out["mae_native"] = mae(native_p, native_t)
    return out


def predict(model: AGG, samples: SampleSet, batch_size: int = 256) -> np.ndarray:
    parts = [model.predict(b) for b in samples.iter_batches(batch_size)]
    if not parts:
        return np.zeros((0, model.config.d_out))
    return np.concatenate(parts, axis=0)


def _loss(model: AGG, batch, rng, task: str) -> Tensor:
    if task == "classification":
        return bce_loss(model.classify(batch, rng, training=True), batch.label)
    return mse_loss(model.forward_impute(batch, rng, training=True), batch.target)


def fit(model: AGG, train: SampleSet, val: SampleSet | None, cfg: TrainConfig,
        stats: Stats | None = None, metrics_out: TextIO | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        adam: AdamState | None = None) -> tuple[dict[str, np.ndarray], AdamState, RunMetrics]:
    """Train ``model`` in place; return the best-validation parameters, optimizer state and metrics."""
    if cfg.task != model.config.task:
        raise ConfigurationError(f"train task {cfg.task!r} != model task {model.config.task!r}")
    if len(train) == 0 and cfg.epochs > 0:
        raise DataError("no training samples")
    rng = make_rng(cfg.seed)
    adam = adam or AdamState()
    metrics = RunMetrics()
    best_state = model.params.state()
    best_adam = adam.copy()
    best_score = None
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        losses = []
        for batch in train.iter_batches(cfg.batch_size, rng):
            try:
                with Tape() as tape:
                    loss = _loss(model, batch, rng, cfg.task)
                grads = backward(tape, loss, model.params)
                grads = clip_global_norm(grads, cfg.clip)
                metrics.clip_norms.append(global_norm(grads))
                adam_step(model.params, grads, adam, lr)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"training diverged ({exc})", epoch=epoch,
                                              step=step, lr=lr) from exc
            losses.append(float(loss.value))
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        rec = EpochRecord(epoch=epoch, loss=float(np.mean(losses)) if losses else float("nan"),
                          lr=lr, samples=len(train), steps=step)
        if val is not None and len(val):
            res = evaluate(model, val, stats=stats)
            rec.val_rmse, rec.val_mae = res.get("rmse"), res.get("mae")
            rec.val_auc, rec.val_mae_native = res.get("auc"), res.get("mae_native")
            # AUC saturates at 1.0 on easy data; break ties on validation cross-entropy
            score = (-rec.val_auc, res["bce"]) if cfg.task == "classification" else (rec.val_rmse,)
        else:
            score = (rec.loss,)
        if best_score is None or score < best_score:
            best_score = score
            best_state = model.params.state()
            best_adam = adam.copy()
            metrics.best_epoch = epoch
        rec.wall = time.perf_counter() - t0
        metrics.records.append(rec)
        if metrics_out is not None:
            metrics_out.write(rec.line() + "\n")
            metrics_out.flush()
        if on_epoch is not None:
            on_epoch(rec)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return best_state, best_adam, metrics


def model_config_for(data: Dataset, base: ModelConfig, pcfg: PipelineConfig, task: str) -> ModelConfig:
    """Fill data-dependent fields (vocabularies, widths, context length) into ``base``."""
    return base.replace(d_y=data.d_y, vocab_sizes=tuple(max(1, len(v)) for v in data.vocabs),
                        n_continuous=data.cont.shape[1], context_length=pcfg.context_length,
                        task=task, discrete_names=tuple(data.schema.discrete))


def train(dataset: Dataset, pcfg: PipelineConfig, mcfg: ModelConfig, tcfg: TrainConfig,
          out_dir: str | Path | None = None, echo: bool = False,
          extra: dict | None = None) -> tuple[Checkpoint, RunMetrics]:
    """Prepare ``dataset``, train, and return the best-validation checkpoint plus metrics.

    With ``out_dir`` the metrics stream goes to ``metrics.jsonl`` and the best
    checkpoint to ``best.ckpt``.
    """
    if tcfg.task != "regression":
        raise ConfigurationError("train() handles imputation; use fit() with series samples "
                                 "for classification")
    data = prepare(dataset, pcfg)
    cfg = model_config_for(dataset, mcfg, pcfg, tcfg.task)
    model = AGG(cfg, seed=tcfg.seed)
    extra = {**(extra or {}), "pipeline": asdict(pcfg), "train": asdict(tcfg)}
    if tcfg.epochs == 0:
        ckpt = Checkpoint.from_model(model, stats=data.stats, vocabs=dataset.vocabs,
                                     schema=dataset.schema, extra=extra)
        if out_dir is not None:
            save_checkpoint(ckpt, Path(out_dir) / "best.ckpt")
        return ckpt, RunMetrics()

    def report(rec: EpochRecord) -> None:
        if echo:
            print(f"epoch {rec.epoch:4d} loss {rec.loss:.5f} val_rmse {rec.val_rmse} "
                  f"lr {rec.lr:.5f} wall {rec.wall:.2f}s", flush=True)

    fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        fh = (Path(out_dir) / "metrics.jsonl").open("w")
    try:
        best, adam, metrics = fit(model, data.train, data.val, tcfg, data.stats, fh, report)
    finally:
        if fh is not None:
            fh.close()
    extra["best_epoch"] = metrics.best_epoch
    ckpt = Checkpoint(cfg, best, adam, data.stats, dataset.vocabs, dataset.schema, extra)
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "best.ckpt")
    return ckpt, metrics
