import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgts.data import (EpisodeError, Instance, IngestionError, SeriesRecord, SplitError,
                       WindowSpec, build_episode, denormalize, holdout, load_dataset,
                       rolling_split, write_dataset, znormalize)


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")


def inst(T, H, M=0, seed=0, future=True):
    rng = np.random.default_rng(seed)
    return Instance(rng.standard_normal(T) * 3 + 10, rng.standard_normal(H) if future else None,
                    rng.standard_normal((T + H, M)))


# --- ingestion -----------------------------------------------------------------


def test_two_items_ten_rows(tmp_path):
    rows = [(item, t, float(t)) for item in ("a", "b") for t in range(10)]
    write_csv(tmp_path / "data.csv", ["item_id", "timestamp", "target"], rows)
    recs = load_dataset(tmp_path / "data.csv")
    assert [r.item_id for r in recs] == ["a", "b"]
    assert all(len(r) == 10 for r in recs)


def test_duplicate_timestamp_names_it(tmp_path):
    write_csv(tmp_path / "data.csv", ["item_id", "timestamp", "target"],
              [("a", 0, 1.0), ("a", 3600, 2.0), ("a", 3600, 3.0)])
    with pytest.raises(IngestionError, match=r"data.csv:4.*duplicate timestamp 3600"):
        load_dataset(tmp_path / "data.csv")


def test_decreasing_timestamp_rejected(tmp_path):
    write_csv(tmp_path / "data.csv", ["item_id", "timestamp", "target"],
              [("a", 5, 1.0), ("a", 4, 2.0)])
    with pytest.raises(IngestionError, match="item a"):
        load_dataset(tmp_path / "data.csv")


def test_known_future_column_index(tmp_path):
    write_csv(tmp_path / "data.csv", ["item_id", "timestamp", "target", "load", "temp_forecast"],
              [("a", t, 1.0, 2.0, 3.0) for t in range(4)])
    (tmp_path / "metadata.json").write_text(json.dumps({"known_future": ["temp_forecast"]}))
    (rec,) = load_dataset(tmp_path / "data.csv")
    assert rec.known_future_cols == [1]


def test_missing_known_future_value_rejected(tmp_path):
    write_csv(tmp_path / "data.csv", ["item_id", "timestamp", "target", "temp"],
              [("a", 0, 1.0, 2.0), ("a", 1, "", "")])
    (tmp_path / "metadata.json").write_text(json.dumps({"known_future": ["temp"]}))
    with pytest.raises(IngestionError, match=":3"):
        load_dataset(tmp_path / "data.csv")


def test_too_many_covariates_rejected(tmp_path):
    header = ["item_id", "timestamp", "target"] + [f"c{j}" for j in range(81)]
    write_csv(tmp_path / "data.csv", header, [["a", 0, 1.0] + [0.0] * 81])
    with pytest.raises(IngestionError, match="M_max"):
        load_dataset(tmp_path / "data.csv")


def test_missing_column_rejected(tmp_path):
    write_csv(tmp_path / "data.csv", ["item_id", "target"], [("a", 1.0)])
    with pytest.raises(IngestionError, match="timestamp"):
        load_dataset(tmp_path / "data.csv")


def test_write_then_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.standard_normal(20)
    y[3] = np.nan
    rec = SeriesRecord("x", np.arange(20) * 60, y, rng.standard_normal((20, 2)), [1])
    csv_path, _ = write_dataset([rec], tmp_path, horizon=4)
    (back,) = load_dataset(csv_path)
    np.testing.assert_array_equal(back.target, rec.target)
    np.testing.assert_array_equal(back.covariates, rec.covariates)
    assert back.known_future_cols == [1]


# --- normalization ------------------------------------------------------------


def test_znormalize_examples():
    out, stats = znormalize([5.0, 5.0, 5.0])
    np.testing.assert_array_equal(out, [0, 0, 0])
    assert stats == (5.0, 0.0)
    out, stats = znormalize([1.0, 3.0])
    np.testing.assert_allclose(out, [-1, 1], atol=1e-7)
    assert stats == (2.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e4, 1e4)))
def test_znormalize_round_trip(x):
    out, stats = znormalize(x)
    np.testing.assert_allclose(denormalize(out, stats), x, atol=1e-9 * max(1.0, np.abs(x).max()))


def test_window_spec_limits():
    WindowSpec(2048, 192)
    with pytest.raises(ValueError):
        WindowSpec(2049, 10)
    with pytest.raises(ValueError):
        WindowSpec(10, 193)


# --- episodes ---------------------------------------------------------------


def test_no_context_episode():
    ep = build_episode(inst(16, 8, future=False), [])
    assert ep.values.shape == (1, 24, 1)
    assert ep.mask[0, 16:].all() and not ep.mask[0, :16].any()
    assert np.all(ep.values[0, 16:, 0] == 0)


def test_three_context_episode_masks_last_slice_only():
    ep = build_episode(inst(16, 8, 2), [inst(16, 8, 2, seed=s) for s in (1, 2, 3)])
    assert ep.values.shape == (4, 24, 3)
    fm = ep.future_mask
    assert fm[3, 16:].all() and fm.sum() == 8
    np.testing.assert_array_equal(ep.mask, fm)


def test_train_mode_designation():
    ctx = [inst(16, 8, seed=s) for s in (1, 2, 3)]
    ep = build_episode(inst(16, 8), ctx, mode="train", extra_targets=())
    assert ep.target_slices == (3,)
    assert ep.mask[:3].sum() == 0 and ep.mask[3, 16:].all()
    ep2 = build_episode(inst(16, 8), ctx, mode="train", extra_targets=(1,))
    assert ep2.target_slices == (1, 3)
    assert ep2.mask[1, 16:].all() and ep2.supervision.shape == (2, 8)


def test_slices_normalized_on_own_lookback():
    ep = build_episode(inst(32, 8, 2), [inst(32, 8, 2, seed=s) for s in (4, 5)])
    for k in range(3):
        for j in range(3):
            col = ep.values[k, :32, j]
            assert abs(col.mean()) < 1e-6 and abs(col.std() - 1) < 1e-6


def test_shared_normalization_uses_target_stats():
    tgt = inst(32, 8, 0)
    ep = build_episode(tgt, [inst(32, 8, seed=9)], shared_norm=True)
    mu, sd = znormalize(tgt.lookback)[1]
    assert ep.norm_mean[0] == mu and ep.norm_std[0] == sd


def test_constant_window_becomes_zeros():
    c = Instance(np.full(16, 4.0), np.zeros(8), np.zeros((24, 0)))
    ep = build_episode(c, [])
    assert np.all(ep.values[0, :16, 0] == 0)


def test_nan_history_zero_filled_and_masked():
    t = inst(16, 8)
    t.lookback[[2, 5]] = np.nan
    ep = build_episode(t, [])
    assert ep.mask[0, [2, 5]].all() and np.all(ep.values[0, [2, 5], 0] == 0)


def test_shape_mismatch_rejected():
    with pytest.raises(EpisodeError, match="slice 0"):
        build_episode(inst(16, 8), [inst(12, 8)])


def test_episode_deterministic():
    a = build_episode(inst(16, 8, 1), [inst(16, 8, 1, seed=2)])
    b = build_episode(inst(16, 8, 1), [inst(16, 8, 1, seed=2)])
    assert a.values.tobytes() == b.values.tobytes()


# --- rolling split ------------------------------------------------------------


def _rec(n):
    return SeriesRecord("r", np.arange(n), np.arange(n, dtype=float), np.zeros((n, 0)))


def test_rolling_split_two_offsets():
    out = rolling_split(_rec(300), WindowSpec(48, 24), [2, 5])
    assert len(out) == 2
    assert out[0].future[-1] == 297 and out[1].future[-1] == 294


def test_rolling_split_offset_zero_ends_at_last_point():
    (v,) = rolling_split(_rec(100), WindowSpec(10, 5), [0])
    assert v.future[-1] == 99


def test_rolling_split_too_short():
    with pytest.raises(SplitError, match="required 300"):
        rolling_split(_rec(100), WindowSpec(48, 24), [228])


def test_holdout():
    hist, truth = holdout(_rec(50), 5)
    assert len(hist) == 45
    np.testing.assert_array_equal(truth, np.arange(45, 50))
