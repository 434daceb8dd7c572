"""Asynchronous multi-channel sinusoids sharing one latent signal.

Channel ``c`` observes ``gain_c * s(t - shift_c) + noise`` where ``s`` is a
fixed mixture of sinusoids, so channels are coherent with channel-specific
delays. The noiseless value is available for any (channel, time) through
:func:`synthetic_truth`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from agg.errors import ConfigurationError
from agg.numerics.rng import make_rng
from agg.pipeline import Dataset, Schema, Vocabulary


@dataclass(frozen=True)
class SyntheticConfig:
    channels: int = 4
    periods: tuple[float, ...] = (24.0, 9.0)
    amplitudes: tuple[float, ...] = (1.0, 0.5)
    phases: tuple[float, ...] = (0.0, 1.0)
    shift_step: float = 1.5
    gains: tuple[float, ...] | None = None
    noise: float = 0.05
    rate: float = 1.0
    horizon: float = 1250.0
    sampling: str = "poisson"
    offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.channels < 2:
            raise ConfigurationError("synthetic data needs at least 2 channels")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if not (len(self.periods) == len(self.amplitudes) == len(self.phases)):
            raise ConfigurationError("periods, amplitudes and phases must have equal length")
        if self.gains is not None and len(self.gains) != self.channels:
            raise ConfigurationError("one gain per channel required")
        if self.sampling not in ("poisson", "regular"):
            raise ConfigurationError(f"unknown sampling {self.sampling!r}")
        if self.rate <= 0 or self.horizon <= 0:
            raise ConfigurationError("rate and horizon must be positive")

    def gain(self, channel) -> np.ndarray:
        gains = np.ones(self.channels) if self.gains is None else np.asarray(self.gains, float)
        return gains[np.asarray(channel)]

    def shift(self, channel) -> np.ndarray:
        return self.shift_step * np.asarray(channel, dtype=np.float64)

    def channel_variance(self, channel: int) -> float:
        """Analytic long-run variance of one channel (signal plus noise)."""
        amp2 = float(np.sum(np.square(self.amplitudes)))
        return float(self.gain(channel)) ** 2 * amp2 / 2.0 + self.noise ** 2


def latent(cfg: SyntheticConfig, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    for period, amp, phase in zip(cfg.periods, cfg.amplitudes, cfg.phases):
        out = out + amp * np.sin(2.0 * np.pi * t / period + phase)
    return out


def synthetic_truth(cfg: SyntheticConfig, channel, t) -> np.ndarray:
    """Noiseless value of ``channel`` at time ``t`` (broadcasting)."""
    t = np.asarray(t, dtype=np.float64)
    return cfg.gain(channel) * latent(cfg, t - cfg.offset - cfg.shift(channel))


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Seed-deterministic asynchronous observations.

    Features: discrete ``channel`` id and continuous ``shift`` (the channel's
    delay, playing the role of a location); measurement ``y``.
    """
    rng = make_rng(cfg.seed)
    times, chans = [], []
    for c in range(cfg.channels):
        if cfg.sampling == "regular":
            tc = np.arange(0.0, cfg.horizon, 1.0 / cfg.rate)
        else:
            n = rng.poisson(cfg.rate * cfg.horizon)
            tc = np.sort(rng.uniform(0.0, cfg.horizon, n))
        times.append(tc + cfg.offset)
        chans.append(np.full(len(tc), c, dtype=np.int64))
    t = np.concatenate(times)
    ch = np.concatenate(chans)
    y = synthetic_truth(cfg, ch, t) + cfg.noise * rng.standard_normal(len(t))
    schema = Schema(time="t", discrete=("channel",), continuous=("shift",), measurements=("y",))
    vocab = Vocabulary("channel", [f"ch{c}" for c in range(cfg.channels)])
    ds = Dataset(t, ch[:, None], cfg.shift(ch)[:, None], y[:, None], schema, [vocab])
    return ds.sorted().with_values(order=np.arange(len(t)))


def generate_labelled_series(n_series: int = 200, nodes: int = 24, seed: int = 0,
                             noise: float = 0.1) -> Dataset:
    """Two-class series: class 1 oscillates three times faster than class 0.

    Each series has two channels observed at random times on [0, 12]; the
    label is stored on every row.
    """
    rng = make_rng(seed)
    t_all, ch_all, y_all, s_all, lab_all = [], [], [], [], []
    for s in range(n_series):
        label = s % 2
        period = 4.0 if label else 12.0
        phase = rng.uniform(0, 2 * np.pi)
        t = np.sort(rng.uniform(0.0, 12.0, nodes))
        ch = rng.integers(0, 2, nodes)
        y = np.sin(2 * np.pi * t / period + phase + 0.5 * ch) + noise * rng.standard_normal(nodes)
        t_all.append(t)
        ch_all.append(ch)
        y_all.append(y)
        s_all.append(np.full(nodes, s))
        lab_all.append(np.full(nodes, float(label)))
    schema = Schema(time="t", discrete=("channel",), continuous=(), measurements=("y",),
                    series="series", label="label")
    ch = np.concatenate(ch_all)
    ds = Dataset(np.concatenate(t_all), ch[:, None], np.zeros((len(ch), 0)),
                 np.concatenate(y_all)[:, None], schema, [Vocabulary("channel", ["ch0", "ch1"])],
                 series=np.concatenate(s_all), labels=np.concatenate(lab_all))
    return ds.sorted()
