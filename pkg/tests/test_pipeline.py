import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agg.errors import ConfigurationError, DataError
from agg.model import AGG
from agg.pipeline import (Dataset, PipelineConfig, Schema, Vocabulary, augmentation_factor,
                          build_query_samples, build_samples, collate, compute_stats, load_csv,
                          mask_remove, pad_block, prepare, select_centered, split_targets,
                          standardize, write_csv)

from conftest import tiny_config


def make_ds(t, y=None, disc=None, series=None) -> Dataset:
    t = np.asarray(t, dtype=float)
    n = len(t)
    y = np.arange(n, dtype=float) if y is None else np.asarray(y, dtype=float)
    disc = np.zeros((n, 0), int) if disc is None else np.asarray(disc).reshape(n, -1)
    schema = Schema(discrete=tuple(f"d{i}" for i in range(disc.shape[1])))
    vocabs = [Vocabulary(f"d{i}", [str(k) for k in range(10)]) for i in range(disc.shape[1])]
    return Dataset(t, disc, np.zeros((n, 0)), y.reshape(n, 1) if y.ndim == 1 else y, schema, vocabs,
                   series=None if series is None else np.asarray(series))


def oracle_samples(inputs_t, targets_t, L, stride):
    """Every (window, target) pair, enumerated directly."""
    n = len(inputs_t)
    out = []
    for k in itertools.count():
        s = k * stride
        e = min(s + L, n)
        lo, hi = inputs_t[s], inputs_t[e - 1]
        for j, tt in enumerate(targets_t):
            if lo <= tt <= hi:
                out.append((s, e - s, j, hi - tt))
        if s + L >= n:
            break
    return sorted(out)


def sample_tuples(ss):
    return sorted(zip(ss.win_start.tolist(), ss.win_len.tolist(), ss.target_index.tolist(),
                      ss.tau_g.tolist()))


# csv ------------------------------------------------------------------------------

def test_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    assert len(load_csv(p)) == 0


def test_three_row_fixture(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("t,station,lat,y\n0.5,A,1.25,3\n1.0,B,-2,\n2.5,A,0,7.5\n")
    ds = load_csv(p, Schema(discrete=("station",), continuous=("lat",)))
    assert len(ds) == 3
    obs = [ds.observation(i) for i in range(3)]
    assert [o.t for o in obs] == [0.5, 1.0, 2.5]
    assert [o.c_disc for o in obs] == [(0,), (1,), (0,)]
    assert [o.c_cont.tolist() for o in obs] == [[1.25], [-2.0], [0.0]]
    assert obs[0].y.tolist() == [3.0] and np.isnan(obs[1].y[0]) and obs[2].y.tolist() == [7.5]
    assert ds.vocabs[0].tokens == ["A", "B"]
    assert len(ds.observed()) == 2


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,y\n0,1\n1,abc\n")
    with pytest.raises(DataError, match=":3:"):
        load_csv(p)
    p.write_text("t,y\n0,1,5\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv(p)


def test_unseen_category_at_inference(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("t,s,y\n0,A,1\n1,C,2\n")
    with pytest.raises(DataError, match="unseen category 'C'"):
        load_csv(p, Schema(discrete=("s",)), vocabs=[Vocabulary("s", ["A", "B"])], grow=False)


def test_schema_sidecar_round_trip(tmp_path):
    schema = Schema(discrete=("a", "b"), continuous=("x",), measurements=("y1", "y2"), series="id")
    schema.write(tmp_path / "s.schema")
    assert Schema.read(tmp_path / "s.schema") == schema


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.integers(0, 3), st.floats(-1e3, 1e3),
                          st.one_of(st.none(), st.floats(-1e9, 1e9))), min_size=1, max_size=30))
def test_csv_round_trip_bitwise(tmp_path_factory, rows):
    t, d, c, y = zip(*rows)
    y = [np.nan if v is None else v for v in y]
    schema = Schema(discrete=("kind",), continuous=("c",))
    ds = Dataset(np.array(t), np.array(d).reshape(-1, 1), np.array(c).reshape(-1, 1),
                 np.array(y).reshape(-1, 1), schema, [Vocabulary("kind", ["p", "q", "r", "s"])])
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, path)
    back = load_csv(path, schema, vocabs=ds.vocabs, grow=False)
    assert back.t.tobytes() == ds.t.tobytes()
    assert np.array_equal(back.disc, ds.disc)
    assert back.cont.tobytes() == ds.cont.tobytes()
    assert np.array_equal(back.y, ds.y, equal_nan=True)


# standardization ------------------------------------------------------------------

def test_two_point_channel():
    out, stats = standardize(make_ds([0, 1], [2, 4]))
    np.testing.assert_allclose(out.y[:, 0], [-1.0, 1.0], atol=1e-15)


def test_restandardizing_is_idempotent():
    r = np.random.default_rng(0)
    ds = make_ds(np.sort(r.uniform(0, 100, 50)), r.normal(3, 2, 50), disc=r.integers(0, 3, 50))
    once, _ = standardize(ds)
    twice, _ = standardize(once)
    for k in range(3):
        rows = once.disc[:, 0] == k
        assert abs(twice.y[rows].mean()) < 1e-9
        assert abs(twice.y[rows].std() - 1.0) < 1e-9


def test_constant_channel_passes_through_with_warning(caplog):
    ds = make_ds([0, 1, 2, 3], [5, 5, 1, 3], disc=[0, 0, 1, 1])
    with caplog.at_level(logging.WARNING):
        out, stats = standardize(ds)
    assert "constant" in caplog.text
    np.testing.assert_array_equal(out.y[:2, 0], [5.0, 5.0])
    np.testing.assert_allclose(out.y[2:, 0], [-1.0, 1.0])


def test_time_rescaled_to_unit_median_gap():
    out, stats = standardize(make_ds([10, 12, 14, 20], [1, 2, 3, 4]))
    assert stats.time_scale == 2.0
    np.testing.assert_array_equal(out.t, [0.0, 1.0, 2.0, 5.0])


def test_time_gap_measured_within_series():
    # two overlapping series sampled every 4 units, offset by 1 from each other
    t = np.r_[np.arange(0, 40, 4.0), np.arange(1, 41, 4.0)]
    ds = make_ds(t, np.arange(20.0), series=[0] * 10 + [1] * 10)
    assert compute_stats(ds).time_scale == 4.0


def test_prepare_uses_training_statistics_only():
    r = np.random.default_rng(1)
    n = 300
    ds = make_ds(np.sort(r.uniform(0, 300, n)), r.normal(size=n), disc=r.integers(0, 2, n))
    cfg = PipelineConfig(context_length=10, stride=5, removal_rate=0.3, seed=4)
    data = prepare(ds, cfg)
    inputs, targets = mask_remove(ds, 0.3, 4)
    train_t, val_t = split_targets(targets, 0.2, 4)
    expected = compute_stats(Dataset.concat([inputs, train_t]))
    np.testing.assert_array_equal(data.stats.mean, expected.mean)
    np.testing.assert_array_equal(data.stats.std, expected.std)
    # perturbing validation measurements changes nothing the model trains or conditions on
    shifted = ds.with_values(y=ds.y.copy())
    val_rows = np.isin(ds.order, val_t.order)
    shifted.y[val_rows] += 100.0
    data2 = prepare(shifted, cfg)
    np.testing.assert_array_equal(data2.stats.mean, data.stats.mean)
    np.testing.assert_array_equal(data2.inputs.y, data.inputs.y)
    np.testing.assert_array_equal(data2.train.y_target, data.train.y_target)


# masking and splitting -------------------------------------------------------------

def test_zero_removal():
    inputs, targets = mask_remove(make_ds(np.arange(20.0)), 0.0, 0)
    assert len(targets) == 0 and len(inputs) == 20


@pytest.mark.parametrize("n, r, expected", [(100, 0.1, 10), (10, 0.25, 3), (7, 0.5, 4)])
def test_removal_count_rounds_half_up(n, r, expected):
    assert len(mask_remove(make_ds(np.arange(float(n))), r, 1)[1]) == expected


def test_removal_partition_seeded():
    ds = make_ds(np.arange(1000.0))
    a, b, c = (mask_remove(ds, 0.3, s)[1].order for s in (5, 5, 6))
    assert np.array_equal(a, b)
    assert not np.array_equal(np.sort(a), np.sort(c))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0, 0.95), st.integers(0, 1000))
def test_removal_partition_law(n, r, seed):
    inputs, targets = mask_remove(make_ds(np.arange(float(n))), r, seed)
    both = np.concatenate([inputs.order, targets.order])
    assert sorted(both.tolist()) == list(range(n))
    assert len(targets) == int(np.floor(r * n + 0.5))


def test_split_fraction_and_partition():
    targets = make_ds(np.arange(10.0))
    train, val = split_targets(targets, 0.2, seed=3)
    assert len(val) == 2
    assert sorted(np.r_[train.order, val.order].tolist()) == list(range(10))


def test_split_empty_targets_rejected():
    with pytest.raises(DataError):
        split_targets(make_ds([]), 0.2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=40), st.floats(0, 100), st.floats(0, 100))
def test_inductive_split_by_time_range(times, a, b):
    lo, hi = min(a, b), max(a, b)
    targets = make_ds(times)
    train, val = split_targets(targets, mode="inductive", val_range=(lo, hi))
    expected = [i for i, t in enumerate(times) if lo <= t <= hi]
    assert sorted(val.order.tolist()) == expected
    assert sorted(np.r_[train.order, val.order].tolist()) == list(range(len(times)))


# sample construction --------------------------------------------------------------

def test_worked_window_example():
    # 13 regular steps; the values at t=2 and t=7 are withheld, leaving a block of 11
    t = np.arange(13.0)
    inputs = make_ds(np.delete(t, [2, 7]))
    targets = make_ds([2.0, 7.0])
    ss = build_samples(inputs, targets, L=11, stride=2)
    assert len(ss) == 2
    assert ss.inputs.t[ss.win_start[0]] == 0.0 and ss.inputs.t[ss.win_start[0] + 10] == 12.0
    np.testing.assert_array_equal(ss.tau_g, [10.0, 5.0])


def test_window_without_targets_yields_nothing():
    inputs = make_ds(np.arange(20.0))
    ss = build_samples(inputs, make_ds([2.5]), L=5, stride=5)
    assert ss.win_start.tolist() == [0]


def test_context_longer_than_inputs_gives_single_padded_window():
    inputs = make_ds(np.arange(4.0))
    ss = build_samples(inputs, make_ds([1.5, 2.0]), L=10, stride=3)
    assert ss.win_start.tolist() == [0, 0] and ss.win_len.tolist() == [4, 4]
    b = ss.batch()
    assert b.mask.shape == (2, 10) and b.mask.sum(axis=1).tolist() == [4, 4]


def _fixture(r, n_max=100):
    n = int(r.integers(2, n_max + 1))
    times = np.round(np.sort(r.uniform(0, 50, n)), 1)  # rounding creates ties
    rate = float(r.uniform(0.05, 0.6))
    ds = make_ds(times, r.normal(size=n), disc=r.integers(0, 3, n))
    inputs, targets = mask_remove(ds, rate, int(r.integers(1000)))
    return inputs.sorted(), targets


def test_fifty_node_enumeration_oracle():
    r = np.random.default_rng(50)
    ds = make_ds(np.sort(r.uniform(0, 50, 50)), r.normal(size=50))
    inputs, targets = mask_remove(ds, 0.2, 0)
    inputs = inputs.sorted()
    for stride in (1, 2, 3, 7):
        ss = build_samples(inputs, targets, 8, stride)
        assert sample_tuples(ss) == oracle_samples(inputs.t, targets.t, 8, stride)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_build_samples_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    inputs, targets = _fixture(r)
    if len(inputs) == 0:
        return
    L = int(r.integers(1, len(inputs) + 3))
    stride = int(r.integers(1, L + 1))
    ss = build_samples(inputs, targets, L, stride)
    assert sample_tuples(ss) == oracle_samples(inputs.t, targets.t, L, stride)
    if len(ss):
        assert np.all(ss.tau_g >= 0)
        np.testing.assert_array_equal(ss.y_target, targets.y[ss.target_index])
        np.testing.assert_array_equal(ss.g_disc, targets.disc[ss.target_index])


def test_samples_respect_series_boundaries():
    t = np.r_[np.arange(10.0), np.arange(10.0)]
    inputs = make_ds(t, series=[0] * 10 + [1] * 10).sorted()
    targets = make_ds([4.5], series=[1])
    ss = build_samples(inputs, targets, L=4, stride=2)
    assert np.all(inputs.series[ss.win_start] == 1)
    assert np.all(inputs.series[ss.win_start + ss.win_len - 1] == 1)


def test_augmentation_factor_baseline_and_oracle():
    r = np.random.default_rng(7)
    ds = make_ds(np.sort(r.uniform(0, 50, 50)))
    inputs, targets = mask_remove(ds, 0.2, 1)
    inputs = inputs.sorted()
    assert augmentation_factor(inputs, targets, 10, 10) == 1.0
    expected = len(oracle_samples(inputs.t, targets.t, 10, 1)) / len(oracle_samples(inputs.t, targets.t, 10, 10))
    assert augmentation_factor(inputs, targets, 10, 1) == expected


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_halving_stride_never_decreases_factor(seed):
    r = np.random.default_rng(seed)
    inputs, targets = _fixture(r)
    L = int(r.integers(2, 20))
    stride = int(r.integers(2, L + 1))
    assert augmentation_factor(inputs, targets, L, stride // 2) >= augmentation_factor(inputs, targets, L, stride)


def test_select_centered_keeps_one_window_per_target():
    inputs = make_ds(np.arange(30.0))
    targets = make_ds([10.2, 20.7])
    ss = select_centered(build_samples(inputs, targets, L=10, stride=2))
    assert ss.target_index.tolist() == [0, 1]
    mids = (ss.inputs.t[ss.win_start] + ss.inputs.t[ss.win_start + ss.win_len - 1]) / 2
    assert np.all(np.abs(mids - targets.t) <= 1.0)


def test_query_window_centred_and_clamped():
    inputs = make_ds(np.arange(20.0))
    queries = make_ds([10.5, 0.0, 25.0])
    ss = build_query_samples(inputs, queries, L=6)
    assert ss.win_start.tolist() == [8, 0, 14]
    np.testing.assert_array_equal(ss.tau_g, [13.0 - 10.5, 5.0, 19.0 - 25.0])


# padding and batching ---------------------------------------------------------------

def test_pad_block_full_and_partial():
    nodes = np.arange(10.0).reshape(5, 2)
    full = pad_block(nodes, 5)
    assert full.pad_mask.all() and np.array_equal(full.H, nodes)
    part = pad_block(nodes[:3], 5)
    assert part.pad_mask.tolist() == [True, True, True, False, False]
    np.testing.assert_array_equal(part.H[3:], 0.0)


def test_pad_block_rejects_empty():
    with pytest.raises(DataError):
        pad_block(np.zeros((0, 3)), 4)
    with pytest.raises(ConfigurationError):
        pad_block(np.zeros((5, 3)), 4)


def test_padded_and_unpadded_model_outputs_agree():
    r = np.random.default_rng(3)
    ds = make_ds(np.arange(12.0), r.normal(size=12), disc=r.integers(0, 3, 12))
    ds = ds.with_values(cont=r.normal(size=(12, 1)))
    inputs, targets = ds.subset(np.r_[0:5, 6:12]), ds.subset([5])
    model = AGG(tiny_config(context_length=11), seed=0)
    tight = build_samples(inputs, targets, L=4, stride=1)
    loose = tight.subset(np.arange(len(tight)))
    loose.L = 11
    np.testing.assert_allclose(model.forward_impute(loose.batch()).value,
                               model.forward_impute(tight.batch()).value, atol=1e-9)


def test_collate_matches_vectorised_batch():
    r = np.random.default_rng(9)
    ds = make_ds(np.sort(r.uniform(0, 20, 30)), r.normal(size=30), disc=r.integers(0, 3, 30))
    inputs, targets = mask_remove(ds, 0.3, 2)
    ss = build_samples(inputs.sorted(), targets, 6, 3)
    a = ss.batch()
    b = collate([ss[i] for i in range(len(ss))], 6)
    for name in ("y", "t", "disc", "cont", "mask", "t_ref", "tau_g", "g_disc", "g_cont", "target"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name), err_msg=name)


def test_pipeline_config_rejects_bad_stride():
    with pytest.raises(ConfigurationError):
        PipelineConfig(context_length=10, stride=11)
    with pytest.raises(ConfigurationError):
        PipelineConfig(stride=0)
