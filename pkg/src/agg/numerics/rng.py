"""Seeded counter-based random streams."""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | None) -> np.random.Generator:
    """Philox-backed generator: identical seed and draw order give identical output."""
    return np.random.Generator(np.random.Philox(0 if seed is None else int(seed)))


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    return make_rng(int(rng.integers(0, 2**63 - 1)))
