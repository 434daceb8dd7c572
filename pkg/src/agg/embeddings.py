"""Learnable embeddings mapping observations and conditioning queries to node vectors.

A node embedding is ``concat[value, time2vec(tau), channel]`` and a condition
vector is ``concat[time2vec(tau_g), channel]``; both share the time and channel
parameters, so identical ``(tau, channel)`` inputs give identical sub-vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from agg.errors import ConfigurationError, DataError, PipelineOrderingError
from agg.numerics import ops
from agg.numerics.tensor import Parameter, ParameterStore, Tensor


@dataclass(frozen=True)
class EmbeddingConfig:
    d_y: int = 1
    vocab_sizes: tuple[int, ...] = ()
    n_continuous: int = 0
    value_dim: int = 16
    time_dim: int = 16
    channel_width: int = 16
    discrete_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.d_y < 1 or self.value_dim < 1 or self.channel_width < 1:
            raise ConfigurationError("embedding widths and d_y must be >= 1")
        if self.time_dim < 2:
            raise ConfigurationError(f"time_dim must be >= 2, got {self.time_dim}")
        if any(v < 1 for v in self.vocab_sizes):
            raise ConfigurationError(f"vocabulary sizes must be >= 1: {self.vocab_sizes}")

    @property
    def n_channel_features(self) -> int:
        return len(self.vocab_sizes) + self.n_continuous

    @property
    def channel_dim(self) -> int:
        return self.channel_width * self.n_channel_features

    @property
    def d_encoder(self) -> int:
        return self.value_dim + self.time_dim + self.channel_dim

    @property
    def d_g(self) -> int:
        return self.time_dim + self.channel_dim

    def feature_name(self, i: int) -> str:
        if i < len(self.discrete_names):
            return self.discrete_names[i]
        return f"disc{i}"


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_embedding_params(store: ParameterStore, cfg: EmbeddingConfig, rng: np.random.Generator,
                          dtype=np.float64) -> None:
    store.new("embed.value.W", _glorot(rng, cfg.d_y, cfg.value_dim), dtype)
    store.new("embed.time.omega", rng.uniform(0.0, 1.0, cfg.time_dim), dtype)
    store.new("embed.time.phi", rng.uniform(0.0, 2 * np.pi, cfg.time_dim), dtype)
    for i, vocab in enumerate(cfg.vocab_sizes):
        store.new(f"embed.disc.{i}.table", _glorot(rng, vocab, cfg.channel_width), dtype)
    for j in range(cfg.n_continuous):
        store.new(f"embed.cont.{j}.W", _glorot(rng, 1, cfg.channel_width), dtype)


def time2vec(tau, omega, phi) -> Tensor:
    """First component linear in ``tau``, the rest ``sin(omega_k * tau + phi_k)``."""
    tau = ops.as_tensor(tau)
    lin = ops.add(ops.mul(ops.reshape(tau, tau.shape + (1,)), omega), phi)
    return ops.concat([lin[..., :1], ops.sin(lin[..., 1:])], axis=-1)


def embed_discrete(index, table: Tensor, feature: str = "discrete") -> Tensor:
    idx = np.asarray(index)
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = idx[(idx < 0) | (idx >= vocab)].reshape(-1)[0]
        raise DataError(f"feature {feature!r}: index {int(bad)} outside vocabulary of size {vocab}")
    return ops.index(table, idx)


def embed_continuous(c, W) -> Tensor:
    c, W = ops.as_tensor(c), ops.as_tensor(W)
    if c.shape[-1] != W.shape[0]:
        raise ConfigurationError(f"embed_continuous: input {c.shape} vs projection {W.shape}")
    if c.ndim == 1:
        return ops.reshape(ops.matmul(ops.reshape(c, (1, -1)), W), (W.shape[1],))
    return ops.matmul(c, W)


embed_value = embed_continuous


def embed_channel(disc: np.ndarray, cont: np.ndarray, store: ParameterStore,
                  cfg: EmbeddingConfig) -> Tensor | None:
    """Concatenate per-feature channel embeddings; ``disc`` is (..., m), ``cont`` (..., k)."""
    disc = np.asarray(disc)
    cont = np.asarray(cont, dtype=np.float64)
    parts = []
    for i in range(len(cfg.vocab_sizes)):
        parts.append(embed_discrete(disc[..., i], store[f"embed.disc.{i}.table"], cfg.feature_name(i)))
    for j in range(cfg.n_continuous):
        parts.append(embed_continuous(cont[..., j:j + 1], store[f"embed.cont.{j}.W"]))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)


def _check_channel_arrays(disc, cont, cfg: EmbeddingConfig, lead: tuple[int, ...]) -> None:
    if np.shape(disc) != lead + (len(cfg.vocab_sizes),):
        raise DataError(f"discrete channel features: expected shape {lead + (len(cfg.vocab_sizes),)},"
                        f" got {np.shape(disc)}")
    if np.shape(cont) != lead + (cfg.n_continuous,):
        raise DataError(f"continuous channel features: expected shape {lead + (cfg.n_continuous,)},"
                        f" got {np.shape(cont)}")


def assemble_nodes(y, t, disc, cont, t_ref, store: ParameterStore, cfg: EmbeddingConfig,
                   pad_mask: np.ndarray | None = None) -> Tensor:
    """Node embeddings h0 of shape (..., L, d_encoder).

    ``t_ref`` is the latest input timestamp of each block (shape (...)); padded
    rows (``pad_mask`` False) come out as zero vectors.
    """
    t = np.asarray(t, dtype=np.float64)
    t_ref = np.asarray(t_ref, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lead = t.shape
    if y.shape != lead + (cfg.d_y,):
        raise DataError(f"measurements: expected shape {lead + (cfg.d_y,)}, got {y.shape}")
    _check_channel_arrays(disc, cont, cfg, lead)
    tau = t_ref[..., None] - t
    real = np.ones(lead, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if np.any(tau[real] < 0):
        raise PipelineOrderingError("input node timestamp exceeds the block reference time")
    tau = np.where(real, tau, 0.0)
    parts = [embed_value(y, store["embed.value.W"]),
             time2vec(tau, store["embed.time.omega"], store["embed.time.phi"])]
    chan = embed_channel(disc, cont, store, cfg)
    if chan is not None:
        parts.append(chan)
    h0 = ops.concat(parts, axis=-1)
    if pad_mask is not None and not np.all(real):
        h0 = ops.mul(h0, real[..., None].astype(h0.dtype))
    return h0


def assemble_condition(tau_g, disc, cont, store: ParameterStore, cfg: EmbeddingConfig) -> Tensor:
    """Condition vectors g of shape (..., d_g); ``tau_g`` may be negative (future)."""
    tau_g = np.asarray(tau_g, dtype=np.float64)
    lead = tau_g.shape
    _check_channel_arrays(disc, cont, cfg, lead)
    parts = [time2vec(tau_g, store["embed.time.omega"], store["embed.time.phi"])]
    chan = embed_channel(disc, cont, store, cfg)
    if chan is not None:
        parts.append(chan)
    return parts[0] if len(parts) == 1 else ops.concat(parts, axis=-1)
