"""Central finite-difference verification of taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from agg.numerics.tensor import Parameter, Tape, Tensor, backward


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must rebuild a scalar loss from the current parameter values and be
    deterministic. With ``max_coords`` only a seeded random subset of
    coordinates per parameter is probed.
    """
    params = list(params)
    with Tape() as tape:
        loss = f()
    analytic = {p.name: g.copy() for p, g in zip(params, backward(tape, loss, params).values())}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().value)
            flat[i] = orig - eps
            down = float(f().value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
