"""Ingestion, standardization, masking and stride-windowed sample construction.

Observations are stored column-wise in a :class:`Dataset`. Training samples
pair a window of ``L`` consecutive (time-sorted) input nodes with one target
lying inside the window's time range; windows advance by ``stride`` nodes.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from agg.errors import ConfigurationError, DataError
from agg.numerics.rng import make_rng

log = logging.getLogger(__name__)


# schema and vocabularies -------------------------------------------------

@dataclass(frozen=True)
class Schema:
    """Column roles of an observation CSV."""

    time: str = "t"
    discrete: tuple[str, ...] = ()
    continuous: tuple[str, ...] = ()
    measurements: tuple[str, ...] = ("y",)
    series: str | None = None
    label: str | None = None

    def columns(self) -> list[str]:
        cols = [self.time]
        if self.series:
            cols.append(self.series)
        cols += list(self.discrete) + list(self.continuous) + list(self.measurements)
        if self.label:
            cols.append(self.label)
        return cols

    @classmethod
    def read(cls, path: str | Path) -> "Schema":
        """Parse a sidecar ``key = value`` file (lists are comma separated)."""
        kv = read_key_values(path)
        known = {"time", "discrete", "continuous", "measurements", "series", "label"}
        unknown = set(kv) - known
        if unknown:
            raise ConfigurationError(f"{path}: unknown schema keys {sorted(unknown)}")

        def lst(key, default=()):
            raw = kv.get(key)
            if raw is None:
                return tuple(default)
            return tuple(x.strip() for x in raw.split(",") if x.strip())

        return cls(time=kv.get("time", "t"), discrete=lst("discrete"), continuous=lst("continuous"),
                   measurements=lst("measurements", ("y",)), series=kv.get("series") or None,
                   label=kv.get("label") or None)

    def write(self, path: str | Path) -> None:
        lines = [f"time = {self.time}", f"discrete = {', '.join(self.discrete)}",
                 f"continuous = {', '.join(self.continuous)}",
                 f"measurements = {', '.join(self.measurements)}"]
        if self.series:
            lines.append(f"series = {self.series}")
        if self.label:
            lines.append(f"label = {self.label}")
        Path(path).write_text("\n".join(lines) + "\n")


def read_key_values(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class Vocabulary:
    """Dense ids for the categories of one discrete feature."""

    name: str
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str, grow: bool) -> int:
        idx = self._ids.get(token)
        if idx is None:
            if not grow:
                raise DataError(f"feature {self.name!r}: unseen category {token!r}")
            idx = len(self.tokens)
            self.tokens.append(token)
            self._ids[token] = idx
        return idx


# observations and datasets -----------------------------------------------

@dataclass(frozen=True)
class Observation:
    y: np.ndarray
    t: float
    c_disc: tuple[int, ...]
    c_cont: np.ndarray


@dataclass
class Dataset:
    """Column-wise observations plus their channel schema."""

    t: np.ndarray
    disc: np.ndarray
    cont: np.ndarray
    y: np.ndarray
    schema: Schema = field(default_factory=Schema)
    vocabs: list[Vocabulary] = field(default_factory=list)
    series: np.ndarray | None = None
    labels: np.ndarray | None = None
    order: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.t)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(n)
        self.disc = np.asarray(self.disc, dtype=np.int64).reshape(n, -1) if n else \
            np.zeros((0, len(self.schema.discrete)), dtype=np.int64)
        self.cont = np.asarray(self.cont, dtype=np.float64).reshape(n, -1) if n else \
            np.zeros((0, len(self.schema.continuous)))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(n, -1) if n else \
            np.zeros((0, len(self.schema.measurements)))
        if self.order is None:
            self.order = np.arange(n)
        if not np.all(np.isfinite(self.t)):
            raise DataError("timestamps must be finite")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    def observation(self, i: int) -> Observation:
        return Observation(self.y[i].copy(), float(self.t[i]), tuple(int(v) for v in self.disc[i]),
                           self.cont[i].copy())

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, t=self.t[idx], disc=self.disc[idx], cont=self.cont[idx], y=self.y[idx],
                       series=None if self.series is None else self.series[idx],
                       labels=None if self.labels is None else self.labels[idx],
                       order=self.order[idx])

    def with_values(self, **kw) -> "Dataset":
        return replace(self, **kw)

    def channel_ids(self) -> np.ndarray:
        """Row-wise channel identity: the tuple of discrete feature indices."""
        if self.disc.shape[1] == 0:
            return np.zeros(len(self), dtype=np.int64)
        _, inv = np.unique(self.disc, axis=0, return_inverse=True)
        return inv.reshape(-1)

    def sort_order(self) -> np.ndarray:
        """Indices sorting by (series, timestamp, channel, file order)."""
        keys = [self.order]
        keys += [self.disc[:, j] for j in range(self.disc.shape[1] - 1, -1, -1)]
        keys.append(self.t)
        if self.series is not None:
            keys.append(self.series)
        return np.lexsort(keys)

    def sorted(self) -> "Dataset":
        return self.subset(self.sort_order())

    def observed(self) -> "Dataset":
        """Rows whose measurement vector is fully present."""
        return self.subset(np.flatnonzero(np.all(np.isfinite(self.y), axis=1)))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        first = parts[0]
        cat = np.concatenate
        return replace(first, t=cat([p.t for p in parts]), disc=cat([p.disc for p in parts]),
                       cont=cat([p.cont for p in parts]), y=cat([p.y for p in parts]),
                       series=None if first.series is None else cat([p.series for p in parts]),
                       labels=None if first.labels is None else cat([p.labels for p in parts]),
                       order=cat([p.order for p in parts]))


def _parse_float(text: str, path, lineno: int, column: str, allow_empty: bool) -> float:
    text = text.strip()
    if text == "":
        if allow_empty:
            return math.nan
        raise DataError(f"{path}:{lineno}: empty value in column {column!r}")
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {column!r}: not a number: {text!r}") from None


def load_csv(path: str | Path, schema: Schema | str | Path | None = None,
             vocabs: list[Vocabulary] | None = None, grow: bool = True) -> Dataset:
    """Read observations from a UTF-8 CSV with a header row.

    ``vocabs`` seeds the category ids; with ``grow=False`` (inference) an unseen
    category raises :class:`DataError`. Empty measurement cells become NaN.
    """
    path = Path(path)
    if schema is None:
        sidecar = path.with_suffix(".schema")
        schema = Schema.read(sidecar) if sidecar.exists() else None
    elif not isinstance(schema, Schema):
        schema = Schema.read(schema)
    vocabs = [Vocabulary(v.name, list(v.tokens)) for v in vocabs] if vocabs else None

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            schema = schema or Schema()
            vocabs = vocabs or [Vocabulary(n) for n in schema.discrete]
            return Dataset(np.zeros(0), np.zeros((0, len(schema.discrete))),
                           np.zeros((0, len(schema.continuous))),
                           np.zeros((0, len(schema.measurements))), schema, vocabs)
        header = [h.strip() for h in header]
        if schema is None:
            schema = infer_schema(header)
        missing = [c for c in schema.columns() if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        if vocabs is None:
            vocabs = [Vocabulary(n) for n in schema.discrete]
        pos = {c: header.index(c) for c in schema.columns()}
        series_vocab = Vocabulary(schema.series or "series")
        t, disc, cont, y, series, labels = [], [], [], [], [], []
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            t.append(_parse_float(row[pos[schema.time]], path, lineno, schema.time, False))
            disc.append([v.lookup(row[pos[n]].strip(), grow) for v, n in zip(vocabs, schema.discrete)])
            cont.append([_parse_float(row[pos[n]], path, lineno, n, False) for n in schema.continuous])
            y.append([_parse_float(row[pos[n]], path, lineno, n, True) for n in schema.measurements])
            if schema.series:
                series.append(series_vocab.lookup(row[pos[schema.series]].strip(), True))
            if schema.label:
                labels.append(_parse_float(row[pos[schema.label]], path, lineno, schema.label, False))
    n = len(t)
    ds = Dataset(np.array(t), np.array(disc, dtype=np.int64).reshape(n, len(schema.discrete)),
                 np.array(cont, dtype=np.float64).reshape(n, len(schema.continuous)),
                 np.array(y, dtype=np.float64).reshape(n, len(schema.measurements)), schema, vocabs,
                 series=np.array(series, dtype=np.int64) if schema.series else None,
                 labels=np.array(labels) if schema.label else None)
    return ds


def infer_schema(header: Sequence[str]) -> Schema:
    """First column is time, ``y``/``y_*`` columns are measurements, the rest continuous."""
    meas = tuple(h for h in header[1:] if h == "y" or h.startswith("y_"))
    rest = tuple(h for h in header[1:] if h not in meas)
    return Schema(time=header[0], continuous=rest, measurements=meas or ("y",))


def write_csv(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces every value bitwise."""
    schema = ds.schema
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns())
        for i in range(len(ds)):
            row = [repr(float(ds.t[i]))]
            if schema.series:
                row.append(str(int(ds.series[i])))
            row += [ds.vocabs[j].tokens[ds.disc[i, j]] for j in range(len(schema.discrete))]
            row += [repr(float(v)) for v in ds.cont[i]]
            row += ["" if math.isnan(v) else repr(float(v)) for v in ds.y[i]]
            if schema.label:
                row.append(repr(float(ds.labels[i])))
            w.writerow(row)


# standardization ---------------------------------------------------------

@dataclass
class Stats:
    """Per-channel measurement moments and the time affine map."""

    channel_keys: list[tuple[int, ...]]
    mean: np.ndarray          # (n_channels, d_y)
    std: np.ndarray           # (n_channels, d_y), 1.0 where the channel is constant
    constant: np.ndarray      # (n_channels, d_y) bool
    global_mean: np.ndarray   # (d_y,)
    global_std: np.ndarray    # (d_y,)
    time_offset: float = 0.0
    time_scale: float = 1.0

    def _rows(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        lookup = {k: i for i, k in enumerate(self.channel_keys)}
        mean = np.empty((len(ds), self.mean.shape[1]))
        std = np.empty_like(mean)
        for i, key in enumerate(map(tuple, ds.disc.tolist())):
            c = lookup.get(key)
            if c is None:
                mean[i], std[i] = self.global_mean, self.global_std
            else:
                mean[i], std[i] = self.mean[c], self.std[c]
        return mean, std

    def apply(self, ds: Dataset) -> Dataset:
        mean, std = self._rows(ds)
        return ds.with_values(y=(ds.y - mean) / std,
                              t=(ds.t - self.time_offset) / self.time_scale)

    def channel_moments(self, disc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ds = Dataset(np.zeros(len(disc)), disc, np.zeros((len(disc), 0)),
                     np.zeros((len(disc), self.mean.shape[1])))
        return self._rows(ds)

    def destandardize_y(self, y: np.ndarray, disc: np.ndarray) -> np.ndarray:
        mean, std = self.channel_moments(np.asarray(disc).reshape(len(y), -1))
        return np.asarray(y) * std + mean

    def to_dict(self) -> dict:
        return {"channel_keys": [list(k) for k in self.channel_keys], "mean": self.mean.tolist(),
                "std": self.std.tolist(), "constant": self.constant.tolist(),
                "global_mean": self.global_mean.tolist(), "global_std": self.global_std.tolist(),
                "time_offset": self.time_offset, "time_scale": self.time_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "Stats":
        return cls([tuple(k) for k in d["channel_keys"]], np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), np.array(d["constant"], dtype=bool),
                   np.array(d["global_mean"], dtype=np.float64),
                   np.array(d["global_std"], dtype=np.float64), float(d["time_offset"]),
                   float(d["time_scale"]))


def compute_stats(ds: Dataset) -> Stats:
    """Population moments per channel; timestamps mapped so the median positive gap is 1."""
    ds = ds.observed()
    if len(ds) < 2:
        raise DataError("standardize needs at least two observations")
    keys = sorted(set(map(tuple, ds.disc.tolist())))
    means, stds, const = [], [], []
    for key in keys:
        rows = np.all(ds.disc == np.array(key, dtype=np.int64), axis=1) if key else \
            np.ones(len(ds), dtype=bool)
        vals = ds.y[rows]
        mu = vals.mean(axis=0)
        sd = vals.std(axis=0)
        flat = ~(sd > 0) | (len(vals) < 2)
        if np.any(flat):
            log.warning("channel %s is constant or has <2 observations; left unscaled", key)
        means.append(np.where(flat, 0.0, mu))
        stds.append(np.where(flat, 1.0, sd))
        const.append(flat)
    gsd = ds.y.std(axis=0)
    # gaps within each series; pooling overlapping series would shrink them
    groups = [ds.t] if ds.series is None else [ds.t[ds.series == s] for s in np.unique(ds.series)]
    gaps = np.concatenate([np.diff(np.unique(g)) for g in groups])
    gaps = gaps[gaps > 0]
    scale = float(np.median(gaps)) if len(gaps) else 1.0
    return Stats(keys, np.array(means), np.array(stds), np.array(const), ds.y.mean(axis=0),
                 np.where(gsd > 0, gsd, 1.0), float(ds.t.min()), scale)


def standardize(ds: Dataset, stats: Stats | None = None) -> tuple[Dataset, Stats]:
    """Standardize measurements per channel and rescale time; stats from ``ds`` unless given."""
    if stats is None:
        stats = compute_stats(ds)
    return stats.apply(ds), stats


# masking and splitting --------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_remove(ds: Dataset, r: float, seed: int) -> tuple[Dataset, Dataset]:
    """Withhold round(r*N) uniformly chosen observations as targets."""
    if not 0.0 <= r < 1.0:
        raise ConfigurationError(f"removal rate must lie in [0, 1), got {r}")
    n = len(ds)
    n_targets = _round_half_up(r * n)
    perm = make_rng(seed).permutation(n)
    is_target = np.zeros(n, dtype=bool)
    is_target[perm[:n_targets]] = True
    return ds.subset(np.flatnonzero(~is_target)), ds.subset(np.flatnonzero(is_target))


def split_targets(targets: Dataset, fraction: float = 0.2, seed: int = 0,
                  mode: str = "transductive",
                  val_range: tuple[float, float] | None = None) -> tuple[Dataset, Dataset]:
    """Split targets into (train, validation).

    Transductive: a seeded random ``fraction``. Inductive: every target whose
    timestamp lies in ``val_range`` (inclusive) is a validation target.
    """
    if len(targets) == 0:
        raise DataError("split_targets: no targets to split")
    if mode == "inductive":
        if val_range is None:
            raise ConfigurationError("inductive split needs val_range")
        lo, hi = val_range
        val = (targets.t >= lo) & (targets.t <= hi)
    elif mode == "transductive":
        if not 0.0 < fraction < 1.0:
            raise ConfigurationError(f"validation fraction must lie in (0, 1), got {fraction}")
        n_val = _round_half_up(fraction * len(targets))
        perm = make_rng(seed + 1).permutation(len(targets))
        val = np.zeros(len(targets), dtype=bool)
        val[perm[:n_val]] = True
    else:
        raise ConfigurationError(f"unknown split mode {mode!r}")
    return targets.subset(np.flatnonzero(~val)), targets.subset(np.flatnonzero(val))


# samples ------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    context_length: int = 100
    stride: int = 10
    removal_rate: float = 0.1
    val_fraction: float = 0.2
    split_mode: str = "transductive"
    val_start: float | None = None
    val_end: float | None = None
    eval_stride: int | None = None
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.context_length < 1:
            raise ConfigurationError("context_length must be >= 1")
        if not 1 <= self.stride <= self.context_length:
            raise ConfigurationError(
                f"stride must lie in [1, L={self.context_length}], got {self.stride}")
        if not 0.0 <= self.removal_rate < 1.0:
            raise ConfigurationError(f"removal_rate must lie in [0, 1), got {self.removal_rate}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    @property
    def val_range(self) -> tuple[float, float] | None:
        if self.val_start is None or self.val_end is None:
            return None
        return (self.val_start, self.val_end)

    def replace(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class Target:
    tau_g: float
    c_disc: tuple[int, ...]
    c_cont: np.ndarray
    y: np.ndarray | None
    t: float


@dataclass(frozen=True)
class Sample:
    inputs: list[Observation]
    pad: int
    target: Target
    label: float | None = None


@dataclass
class Batch:
    y: np.ndarray        # (B, L, d_y)
    t: np.ndarray        # (B, L)
    disc: np.ndarray     # (B, L, m)
    cont: np.ndarray     # (B, L, k)
    mask: np.ndarray     # (B, L) True = real node
    t_ref: np.ndarray    # (B,)
    tau_g: np.ndarray    # (B,)
    g_disc: np.ndarray   # (B, m)
    g_cont: np.ndarray   # (B, k)
    target: np.ndarray | None = None  # (B, d_y)
    label: np.ndarray | None = None   # (B,)

    def __len__(self) -> int:
        return len(self.t_ref)


@dataclass(frozen=True)
class BlockInput:
    H: np.ndarray
    pad_mask: np.ndarray


def pad_block(nodes, L: int) -> BlockInput:
    """Append zero rows to ``nodes`` (n x d) up to ``L``; the mask marks real rows."""
    nodes = np.asarray(nodes, dtype=np.float64)
    n = nodes.shape[0]
    if n == 0:
        raise DataError("pad_block: a block needs at least one node")
    if n > L:
        raise ConfigurationError(f"pad_block: {n} nodes exceed context length {L}")
    H = np.zeros((L,) + nodes.shape[1:])
    H[:n] = nodes
    mask = np.zeros(L, dtype=bool)
    mask[:n] = True
    return BlockInput(H, mask)


class SampleSet:
    """(window, target) pairs referencing a time-sorted input dataset.

    Window ``s`` covers input rows ``[win_start[s], win_start[s] + win_len[s])``.
    """

    def __init__(self, inputs: Dataset, L: int, win_start, win_len, tau_g, g_disc, g_cont,
                 t_target, y_target=None, label=None, target_index=None):
        self.inputs = inputs
        self.L = L
        self.win_start = np.asarray(win_start, dtype=np.int64)
        self.win_len = np.asarray(win_len, dtype=np.int64)
        self.tau_g = np.asarray(tau_g, dtype=np.float64)
        n = len(self.win_start)
        self.g_disc = np.asarray(g_disc, dtype=np.int64).reshape(n, inputs.disc.shape[1])
        self.g_cont = np.asarray(g_cont, dtype=np.float64).reshape(n, inputs.cont.shape[1])
        self.t_target = np.asarray(t_target, dtype=np.float64)
        self.y_target = None if y_target is None else \
            np.asarray(y_target, dtype=np.float64).reshape(n, inputs.y.shape[1])
        self.label = None if label is None else np.asarray(label, dtype=np.float64)
        self.target_index = (np.full(n, -1, dtype=np.int64) if target_index is None
                             else np.asarray(target_index, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.win_start)

    def keys(self) -> list[tuple]:
        """Canonical identity of each sample: (window start, window length, target index)."""
        return list(zip(self.win_start.tolist(), self.win_len.tolist(), self.target_index.tolist()))

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleSet(self.inputs, self.L, self.win_start[idx], self.win_len[idx],
                         self.tau_g[idx], self.g_disc[idx], self.g_cont[idx], self.t_target[idx],
                         None if self.y_target is None else self.y_target[idx],
                         None if self.label is None else self.label[idx], self.target_index[idx])

    def __getitem__(self, i: int) -> Sample:
        s, n = int(self.win_start[i]), int(self.win_len[i])
        obs = [self.inputs.observation(j) for j in range(s, s + n)]
        target = Target(float(self.tau_g[i]), tuple(int(v) for v in self.g_disc[i]),
                        self.g_cont[i].copy(),
                        None if self.y_target is None else self.y_target[i].copy(),
                        float(self.t_target[i]))
        return Sample(obs, self.L - n, target, None if self.label is None else float(self.label[i]))

    def batch(self, idx=None) -> Batch:
        idx = np.arange(len(self)) if idx is None else np.asarray(idx, dtype=np.int64)
        ds = self.inputs
        offsets = np.arange(self.L)
        mask = offsets[None, :] < self.win_len[idx, None]
        rows = np.where(mask, self.win_start[idx, None] + offsets[None, :], 0)
        last = self.win_start[idx] + self.win_len[idx] - 1
        t_ref = ds.t[last]
        t = np.where(mask, ds.t[rows], t_ref[:, None])
        m3 = mask[..., None]
        return Batch(y=np.where(m3, ds.y[rows], 0.0), t=t, disc=np.where(m3, ds.disc[rows], 0),
                     cont=np.where(m3, ds.cont[rows], 0.0), mask=mask, t_ref=t_ref,
                     tau_g=self.tau_g[idx], g_disc=self.g_disc[idx], g_cont=self.g_cont[idx],
                     target=None if self.y_target is None else self.y_target[idx],
                     label=None if self.label is None else self.label[idx])

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def collate(samples: Sequence[Sample], L: int) -> Batch:
    """Stack individual samples into a padded batch."""
    B = len(samples)
    if B == 0:
        raise DataError("collate: no samples")
    first = samples[0].inputs[0]
    d_y, m, k = len(first.y), len(first.c_disc), len(first.c_cont)
    y = np.zeros((B, L, d_y))
    t = np.zeros((B, L))
    disc = np.zeros((B, L, m), dtype=np.int64)
    cont = np.zeros((B, L, k))
    mask = np.zeros((B, L), dtype=bool)
    t_ref = np.zeros(B)
    for b, s in enumerate(samples):
        n = len(s.inputs)
        if n == 0:
            raise DataError("collate: sample without input nodes")
        if n > L:
            raise ConfigurationError(f"collate: {n} nodes exceed context length {L}")
        t_ref[b] = max(o.t for o in s.inputs)
        t[b, :] = t_ref[b]
        for j, o in enumerate(s.inputs):
            y[b, j], t[b, j], disc[b, j], cont[b, j] = o.y, o.t, o.c_disc, o.c_cont
        mask[b, :n] = True
    tgt = [s.target for s in samples]
    target = None if tgt[0].y is None else np.stack([g.y for g in tgt])
    label = None if samples[0].label is None else np.array([s.label for s in samples])
    return Batch(y, t, disc, cont, mask, t_ref, np.array([g.tau_g for g in tgt]),
                 np.array([g.c_disc for g in tgt], dtype=np.int64).reshape(B, m),
                 np.array([g.c_cont for g in tgt], dtype=np.float64).reshape(B, k), target, label)


def _series_bounds(ds: Dataset) -> list[tuple[int, int]]:
    if ds.series is None or len(ds) == 0:
        return [(0, len(ds))]
    change = np.flatnonzero(np.diff(ds.series)) + 1
    edges = np.concatenate([[0], change, [len(ds)]])
    return list(zip(edges[:-1].tolist(), edges[1:].tolist()))


def window_starts(n: int, L: int, stride: int) -> list[int]:
    """Starts of successive windows over ``n`` nodes until one reaches the end."""
    starts = [0]
    while starts[-1] + L < n:
        starts.append(starts[-1] + stride)
    return starts


def build_samples(inputs: Dataset, targets: Dataset, L: int, stride: int) -> SampleSet:
    """Pair every stride window of ``L`` input nodes with each target in its time range.

    ``inputs`` must already be time-sorted (see :meth:`Dataset.sorted`).
    Output order is (window start, target timestamp, target row).
    """
    if not 1 <= stride <= L:
        raise ConfigurationError(f"stride must lie in [1, {L}], got {stride}")
    ws, wl, ti = [], [], []
    tgt_series = targets.series
    for a, b in _series_bounds(inputs):
        if b == a:
            continue
        if tgt_series is not None and inputs.series is not None:
            sel = np.flatnonzero(tgt_series == inputs.series[a])
        else:
            sel = np.arange(len(targets))
        tt = targets.t[sel]
        order = np.lexsort((sel, tt))
        sel, tt = sel[order], tt[order]
        for s in window_starts(b - a, L, stride):
            lo_i, hi_i = a + s, min(a + s + L, b)
            lo_t, hi_t = inputs.t[lo_i], inputs.t[hi_i - 1]
            first = np.searchsorted(tt, lo_t, side="left")
            last = np.searchsorted(tt, hi_t, side="right")
            for j in sel[first:last]:
                ws.append(lo_i)
                wl.append(hi_i - lo_i)
                ti.append(j)
    ws_a, wl_a = np.array(ws, dtype=np.int64), np.array(wl, dtype=np.int64)
    ti_a = np.array(ti, dtype=np.int64)
    t_ref = inputs.t[ws_a + wl_a - 1] if len(ws_a) else np.zeros(0)
    return SampleSet(inputs, L, ws_a, wl_a, t_ref - targets.t[ti_a], targets.disc[ti_a],
                     targets.cont[ti_a], targets.t[ti_a], targets.y[ti_a],
                     None if targets.labels is None else targets.labels[ti_a], ti_a)


def select_centered(samples: SampleSet) -> SampleSet:
    """Keep one sample per target: the window whose time midpoint is closest to it."""
    if len(samples) == 0:
        return samples
    ds = samples.inputs
    mid = 0.5 * (ds.t[samples.win_start] + ds.t[samples.win_start + samples.win_len - 1])
    dist = np.abs(mid - samples.t_target)
    order = np.lexsort((np.arange(len(samples)), dist, samples.target_index))
    tgt = samples.target_index[order]
    keep = order[np.concatenate([[True], tgt[1:] != tgt[:-1]])]
    return samples.subset(np.sort(keep))


def build_query_samples(inputs: Dataset, queries: Dataset, L: int) -> SampleSet:
    """One sample per query row, using the ``L`` input nodes centred on the query time.

    The window is clamped to its series, so queries beyond the last node
    condition on the final block (``tau_g < 0``).
    """
    bounds = _series_bounds(inputs)
    lookup = {} if inputs.series is None else {int(inputs.series[a]): (a, b) for a, b in bounds}
    ws, wl = [], []
    for i in range(len(queries)):
        if inputs.series is None:
            a, b = bounds[0]
        else:
            if queries.series is None or int(queries.series[i]) not in lookup:
                raise DataError(f"query {i}: series not present in the inputs")
            a, b = lookup[int(queries.series[i])]
        if b == a:
            raise DataError("no input nodes to condition on")
        pos = a + int(np.searchsorted(inputs.t[a:b], queries.t[i], side="right"))
        start = min(max(a, pos - L // 2), max(a, b - L))
        ws.append(start)
        wl.append(min(L, b - start))
    ws_a, wl_a = np.array(ws, dtype=np.int64), np.array(wl, dtype=np.int64)
    t_ref = inputs.t[ws_a + wl_a - 1] if len(ws_a) else np.zeros(0)
    return SampleSet(inputs, L, ws_a, wl_a, t_ref - queries.t, queries.disc, queries.cont,
                     queries.t, None, None, np.arange(len(queries)))


def augmentation_factor(inputs: Dataset, targets: Dataset, L: int, stride: int) -> float:
    """Sample count at ``stride`` relative to non-overlapping windows (stride = L)."""
    base = len(build_samples(inputs, targets, L, L))
    if base == 0:
        return 1.0
    return len(build_samples(inputs, targets, L, stride)) / base


def build_series_samples(ds: Dataset, L: int) -> SampleSet:
    """One classification sample per series: its last ``L`` nodes, queried at the final node.

    Requires ``ds`` sorted with a ``series`` column and per-row labels.
    """
    if ds.labels is None:
        raise DataError("classification samples need a label column")
    ws, wl, last = [], [], []
    for a, b in _series_bounds(ds):
        if b == a:
            continue
        start = max(a, b - L)
        ws.append(start)
        wl.append(b - start)
        last.append(b - 1)
    last = np.array(last, dtype=np.int64)
    return SampleSet(ds, L, ws, wl, np.zeros(len(last)), ds.disc[last], ds.cont[last], ds.t[last],
                     None, ds.labels[last], last)


# end-to-end data preparation ---------------------------------------------

@dataclass
class PreparedData:
    inputs: Dataset
    train_targets: Dataset
    val_targets: Dataset
    stats: Stats
    train: SampleSet
    val: SampleSet


def prepare(raw: Dataset, cfg: PipelineConfig) -> PreparedData:
    """Mask, split, standardize (training statistics only) and build samples."""
    observed = raw.observed()
    inputs, targets = mask_remove(observed, cfg.removal_rate, cfg.seed)
    if len(targets) == 0:
        raise DataError("removal rate produced no targets")
    train_t, val_t = split_targets(targets, cfg.val_fraction, cfg.seed, cfg.split_mode, cfg.val_range)
    stats = compute_stats(Dataset.concat([inputs, train_t]))
    inputs, train_t, val_t = (stats.apply(d).sorted() for d in (inputs, train_t, val_t))
    L = cfg.context_length
    train = build_samples(inputs, train_t, L, cfg.stride)
    val = select_centered(build_samples(inputs, val_t, L, cfg.eval_stride or max(1, L // 2)))
    return PreparedData(inputs, train_t, val_t, stats, train, val)
