import numpy as np
import pytest

from agg.model import AGG, ModelConfig
from agg.pipeline import Batch


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_y=1, vocab_sizes=(3,), n_continuous=1, value_dim=2, time_dim=2,
                channel_width=2, heads=2, encoder_layers=2, dropout=0.0, context_length=6)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng: np.random.Generator, cfg: ModelConfig, B: int, L: int, n_real=None,
                 t_scale: float = 3.0) -> Batch:
    """Random padded batch; ``n_real`` real rows per block (default: random 1..L)."""
    n_real = rng.integers(1, L + 1, size=B) if n_real is None else np.broadcast_to(n_real, (B,))
    mask = np.arange(L)[None, :] < np.asarray(n_real)[:, None]
    t = np.sort(rng.uniform(0.0, t_scale, size=(B, L)), axis=1)
    t_ref = np.array([t[b, n - 1] for b, n in enumerate(n_real)])
    t = np.where(mask, t, t_ref[:, None])
    m = len(cfg.vocab_sizes)
    disc = np.stack([rng.integers(0, v, size=(B, L)) for v in cfg.vocab_sizes], axis=-1) if m \
        else np.zeros((B, L, 0), dtype=np.int64)
    cont = rng.normal(size=(B, L, cfg.n_continuous))
    y = rng.normal(size=(B, L, cfg.d_y))
    m3 = mask[..., None]
    g_disc = np.stack([rng.integers(0, v, size=B) for v in cfg.vocab_sizes], axis=-1) if m \
        else np.zeros((B, 0), dtype=np.int64)
    return Batch(y=np.where(m3, y, 0.0), t=t, disc=np.where(m3, disc, 0),
                 cont=np.where(m3, cont, 0.0), mask=mask, t_ref=t_ref,
                 tau_g=rng.uniform(0.0, t_scale, size=B), g_disc=g_disc,
                 g_cont=rng.normal(size=(B, cfg.n_continuous)),
                 target=rng.normal(size=(B, cfg.d_y)), label=None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return AGG(tiny_config(), seed=3)


# acceptance summary -----------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        verdict = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        _CRITERIA[number] = (title, verdict, getattr(item, "detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {verdict}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
