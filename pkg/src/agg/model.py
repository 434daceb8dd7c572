"""The asynchronous graph generator network.

Input nodes are embedded, passed through ``encoder_layers`` self-attention
blocks, and a conditional cross-attention generator produces a latent vector
for the query node. A linear head turns the latent into a measurement
estimate (regression) or a probability (binary classification).

Shapes follow the convention ``(..., L, d)`` so a leading batch axis is
optional everywhere.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from agg.embeddings import EmbeddingConfig, _glorot, assemble_condition, assemble_nodes, init_embedding_params
from agg.errors import ConfigurationError
from agg.numerics import ops
from agg.numerics.rng import make_rng
from agg.numerics.tensor import ParameterStore, Tensor

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class ModelConfig:
    d_y: int = 1
    vocab_sizes: tuple[int, ...] = ()
    n_continuous: int = 0
    value_dim: int = 16
    time_dim: int = 16
    channel_width: int = 16
    heads: int = 8
    encoder_layers: int = 2
    generator_dim: int | None = None
    dropout: float = 0.2
    context_length: int = 100
    task: str = "regression"
    dtype: str = "float64"
    discrete_names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        object.__setattr__(self, "discrete_names", tuple(self.discrete_names))
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.heads < 1 or self.encoder_layers < 0 or self.context_length < 1:
            raise ConfigurationError("heads, context_length must be >= 1 and encoder_layers >= 0")
        if self.d_encoder % self.heads:
            raise ConfigurationError(
                f"d_encoder={self.d_encoder} is not divisible by heads={self.heads}")
        if self.d_gen < 1:
            raise ConfigurationError(f"generator_dim must be >= 1, got {self.d_gen}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        emb = self.embedding
        assert emb.d_encoder == emb.value_dim + emb.time_dim + emb.channel_dim
        assert emb.d_g == emb.time_dim + emb.channel_dim

    @property
    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.d_y, self.vocab_sizes, self.n_continuous, self.value_dim,
                               self.time_dim, self.channel_width, self.discrete_names)

    @property
    def d_encoder(self) -> int:
        return self.embedding.d_encoder

    @property
    def d_g(self) -> int:
        return self.embedding.d_g

    @property
    def d_k(self) -> int:
        return self.d_encoder // self.heads

    @property
    def d_gen(self) -> int:
        return self.d_encoder if self.generator_dim is None else self.generator_dim

    @property
    def d_out(self) -> int:
        return self.d_y if self.task == "regression" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        d["discrete_names"] = list(self.discrete_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab_sizes"] = tuple(d.get("vocab_sizes", ()))
        d["discrete_names"] = tuple(d.get("discrete_names", ()))
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# layers ---------------------------------------------------------------------

def linear(x, W, b=None) -> Tensor:
    x = ops.as_tensor(x)
    if x.ndim == 1:
        out = ops.reshape(ops.matmul(ops.reshape(x, (1, -1)), W), (W.shape[-1],))
    else:
        out = ops.matmul(x, W)
    return out if b is None else ops.add(out, b)


def mlp(x, W1, b1, W2, b2, p: float, rng, training: bool) -> Tensor:
    """Two-layer feed-forward network with a leaky rectifier and dropout in the hidden layer."""
    hidden = ops.leaky_relu(linear(x, W1, b1))
    hidden = ops.dropout(hidden, p, rng, training)
    return linear(hidden, W2, b2)


def _key_mask(pad_mask, scores: Tensor) -> np.ndarray | None:
    if pad_mask is None:
        return None
    mask = np.asarray(pad_mask, dtype=bool)
    n_keys = scores.shape[-1]
    if mask.shape[-1] != n_keys:
        raise ConfigurationError(f"pad mask covers {mask.shape[-1]} keys, expected {n_keys}")
    # broadcast over the query axis and the head axis when present
    extra = scores.ndim - mask.ndim
    return mask.reshape(mask.shape[:-1] + (1,) * extra + (n_keys,))


def attention_head(Hq, Hk, Wq, Wk, Wv, pad_mask=None, p: float = 0.0, rng=None,
                   training: bool = False) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention of ``Hq`` rows over ``Hk`` rows.

    Returns the attended values and the softmaxed weight matrix.
    """
    return _attend(ops.matmul(Hq, Wq), ops.matmul(Hk, Wk), ops.matmul(Hk, Wv), pad_mask, p, rng,
                   training)


def _joint_heads(store: ParameterStore, prefix: str, heads: int, name: str) -> Tensor:
    """Per-head projections side by side: (d_in, heads * d_k)."""
    return ops.concat([store[f"{prefix}.head.{j}.{name}"] for j in range(heads)], axis=-1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, heads*d) -> (..., heads, L, d)."""
    x = ops.reshape(x, x.shape[:-1] + (heads, x.shape[-1] // heads))
    nd = x.ndim
    return ops.permute(x, list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1])


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, d_v) -> (..., L, heads*d_v)."""
    nd = x.ndim
    x = ops.permute(x, list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1])
    return ops.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _attend(Q, K, V, pad_mask, p, rng, training):
    scores = ops.mul(ops.matmul(Q, ops.swap_last(K)), 1.0 / math.sqrt(K.shape[-1]))
    weights = ops.softmax_rows(scores, _key_mask(pad_mask, scores))
    return ops.matmul(ops.dropout(weights, p, rng, training), V), weights


def multi_head_self_attention(H, store: ParameterStore, prefix: str, heads: int, pad_mask=None,
                              p: float = 0.0, rng=None, training: bool = False,
                              return_weights: bool = False):
    """Concatenate ``heads`` attention heads over the rows of ``H`` and project with WO."""
    H = ops.as_tensor(H)
    Q = _split_heads(ops.matmul(H, _joint_heads(store, prefix, heads, "WQ")), heads)
    K = _split_heads(ops.matmul(H, _joint_heads(store, prefix, heads, "WK")), heads)
    V = _split_heads(ops.matmul(H, _joint_heads(store, prefix, heads, "WV")), heads)
    out, weights = _attend(Q, K, V, pad_mask, p, rng, training)
    result = ops.matmul(_merge_heads(out), store[f"{prefix}.WO"])
    return (result, weights) if return_weights else result


def encoder_block(H, store: ParameterStore, prefix: str, cfg: ModelConfig, pad_mask=None,
                  rng=None, training: bool = False) -> Tensor:
    u = ops.add(H, multi_head_self_attention(H, store, prefix, cfg.heads, pad_mask, cfg.dropout,
                                             rng, training))
    normed = ops.layer_norm(u, store[f"{prefix}.ln_mlp.gamma"], store[f"{prefix}.ln_mlp.beta"])
    hidden = mlp(normed, store[f"{prefix}.mlp.W1"], store[f"{prefix}.mlp.b1"],
                 store[f"{prefix}.mlp.W2"], store[f"{prefix}.mlp.b2"], cfg.dropout, rng, training)
    return ops.layer_norm(ops.add(u, hidden), store[f"{prefix}.ln_out.gamma"],
                          store[f"{prefix}.ln_out.beta"])


def conditional_attention(g, Hl, store: ParameterStore, heads: int, pad_mask=None,
                          p: float = 0.0, rng=None, training: bool = False,
                          prefix: str = "generator", return_weights: bool = False):
    """Cross-attention of one query per block (from ``g``) over the encoded nodes ``Hl``.

    Returns the concatenated head outputs of shape (..., heads * d_v).
    """
    g, Hl = ops.as_tensor(g), ops.as_tensor(Hl)
    g_bar = ops.layer_norm(g, store[f"{prefix}.ln_g.gamma"], store[f"{prefix}.ln_g.beta"])
    h_bar = ops.layer_norm(Hl, store[f"{prefix}.ln_h.gamma"], store[f"{prefix}.ln_h.beta"])
    # one query row per block: (..., 1, d_g) -> (..., heads, 1, d_k)
    G = _split_heads(ops.matmul(ops.reshape(g_bar, g_bar.shape[:-1] + (1, g_bar.shape[-1])),
                                store[f"{prefix}.WG"]), heads)
    K = _split_heads(ops.matmul(h_bar, _joint_heads(store, prefix, heads, "WK")), heads)
    V = _split_heads(ops.matmul(h_bar, _joint_heads(store, prefix, heads, "WV")), heads)
    out, weights = _attend(G, K, V, pad_mask, p, rng, training)
    out = ops.reshape(_merge_heads(out), out.shape[:-3] + (heads * out.shape[-1],))
    return (out, weights) if return_weights else out


def generator_block(g, Hl, store: ParameterStore, cfg: ModelConfig, pad_mask=None, rng=None,
                    training: bool = False, prefix: str = "generator") -> Tensor:
    """Latent of the generated node: LN[u + MLP(LN[u])] with u the projected cross-attention."""
    heads_out = conditional_attention(g, Hl, store, cfg.heads, pad_mask, cfg.dropout, rng,
                                      training, prefix)
    u = linear(heads_out, store[f"{prefix}.WO"])
    normed = ops.layer_norm(u, store[f"{prefix}.ln_mlp.gamma"], store[f"{prefix}.ln_mlp.beta"])
    hidden = mlp(normed, store[f"{prefix}.mlp.W1"], store[f"{prefix}.mlp.b1"],
                 store[f"{prefix}.mlp.W2"], store[f"{prefix}.mlp.b2"], cfg.dropout, rng, training)
    return ops.layer_norm(ops.add(u, hidden), store[f"{prefix}.ln_out.gamma"],
                          store[f"{prefix}.ln_out.beta"])


# parameters -----------------------------------------------------------------

def _init_layer_norm(store, prefix, d, dtype):
    store.new(f"{prefix}.gamma", np.ones(d), dtype)
    store.new(f"{prefix}.beta", np.zeros(d), dtype)


def _init_mlp(store, prefix, d, hidden, rng, dtype):
    store.new(f"{prefix}.W1", _glorot(rng, d, hidden), dtype)
    store.new(f"{prefix}.b1", np.zeros(hidden), dtype)
    store.new(f"{prefix}.W2", _glorot(rng, hidden, d), dtype)
    store.new(f"{prefix}.b2", np.zeros(d), dtype)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterStore:
    """Fresh, seed-deterministic parameters for ``cfg``."""
    rng = make_rng(seed)
    dtype = np.dtype(cfg.dtype)
    store = ParameterStore()
    init_embedding_params(store, cfg.embedding, rng, dtype)
    D, l, dk = cfg.d_encoder, cfg.heads, cfg.d_k
    for i in range(cfg.encoder_layers):
        pre = f"encoder.{i}"
        for j in range(l):
            for name in ("WQ", "WK", "WV"):
                store.new(f"{pre}.head.{j}.{name}", _glorot(rng, D, dk), dtype)
        store.new(f"{pre}.WO", _glorot(rng, l * dk, D), dtype)
        _init_layer_norm(store, f"{pre}.ln_mlp", D, dtype)
        _init_mlp(store, f"{pre}.mlp", D, l * D, rng, dtype)
        _init_layer_norm(store, f"{pre}.ln_out", D, dtype)
    pre = "generator"
    dg, dgen = cfg.d_g, cfg.d_gen
    _init_layer_norm(store, f"{pre}.ln_g", dg, dtype)
    _init_layer_norm(store, f"{pre}.ln_h", D, dtype)
    store.new(f"{pre}.WG", _glorot(rng, dg, l * dk), dtype)
    for j in range(l):
        for name in ("WK", "WV"):
            store.new(f"{pre}.head.{j}.{name}", _glorot(rng, D, dk), dtype)
    store.new(f"{pre}.WO", _glorot(rng, l * dk, dgen), dtype)
    _init_layer_norm(store, f"{pre}.ln_mlp", dgen, dtype)
    _init_mlp(store, f"{pre}.mlp", dgen, l * dgen, rng, dtype)
    _init_layer_norm(store, f"{pre}.ln_out", dgen, dtype)
    store.new("head.W", _glorot(rng, dgen, cfg.d_out), dtype)
    store.new("head.b", np.zeros(cfg.d_out), dtype)
    return store


def parameter_breakdown(cfg: ModelConfig) -> dict[str, int]:
    return {p.name: int(p.value.size) for p in init_params(cfg)}


def count_parameters(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars for ``cfg``."""
    return sum(parameter_breakdown(cfg).values())


# full model -----------------------------------------------------------------

class AGG:
    """Parameters plus the forward passes for imputation and classification.

    ``batch`` is any object with the arrays produced by
    :func:`agg.pipeline.collate`: ``y, t, disc, cont, mask, t_ref, tau_g,
    g_disc, g_cont``.
    """

    def __init__(self, config: ModelConfig, params: ParameterStore | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    def encode(self, batch, rng=None, training: bool = False) -> Tensor:
        cfg = self.config
        H = assemble_nodes(batch.y, batch.t, batch.disc, batch.cont, batch.t_ref, self.params,
                           cfg.embedding, batch.mask)
        for i in range(cfg.encoder_layers):
            H = encoder_block(H, self.params, f"encoder.{i}", cfg, batch.mask, rng, training)
        return H

    def latent(self, batch, rng=None, training: bool = False) -> Tensor:
        H = self.encode(batch, rng, training)
        g = assemble_condition(batch.tau_g, batch.g_disc, batch.g_cont, self.params,
                               self.config.embedding)
        return generator_block(g, H, self.params, self.config, batch.mask, rng, training)

    def forward_impute(self, batch, rng=None, training: bool = False) -> Tensor:
        """Measurement estimate in standardized units, shape (..., d_y)."""
        return linear(self.latent(batch, rng, training), self.params["head.W"], self.params["head.b"])

    def logits(self, batch, rng=None, training: bool = False) -> Tensor:
        out = linear(self.latent(batch, rng, training), self.params["head.W"], self.params["head.b"])
        return ops.reshape(out, out.shape[:-1])

    def classify(self, batch, rng=None, training: bool = False) -> Tensor:
        """Probability of the positive class, shape (...)."""
        return ops.sigmoid(self.logits(batch, rng, training))

    def predict(self, batch) -> np.ndarray:
        if self.config.task == "classification":
            return self.classify(batch).value
        return self.forward_impute(batch).value
