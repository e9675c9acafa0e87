import gzip
import struct
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uapsga import data
from uapsga.errors import ConfigError, DataError, FormatError

from oracles import lstsq_accuracy


def _write_raw(path, magic, dims, payload: bytes):
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


def test_idx_header_parsed_from_raw_bytes(tmp_path):
    pixels = bytes(range(256)) * 40
    _write_raw(tmp_path / "img", 0x00000803, (10, 28, 28), pixels[: 10 * 28 * 28])
    _write_raw(tmp_path / "lab", 0x00000801, (10,), bytes(range(10)))
    raw = (tmp_path / "img").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    ds = data.load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images.shape == (10, 1, 28, 28)
    assert ds.labels.tolist() == list(range(10))


def test_pixel_scaling_endpoints(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (1, 1, 2), bytes([0, 255]))
    _write_raw(tmp_path / "lab", 0x801, (1,), bytes([0]))
    ds = data.load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.images[0, 0, 0, 0] == 0.0
    assert ds.images[0, 0, 0, 1] == 1.0


def test_label_count_mismatch(tmp_path):
    _write_raw(tmp_path / "img", 0x803, (10, 2, 2), bytes(40))
    _write_raw(tmp_path / "lab", 0x801, (9,), bytes(9))
    with pytest.raises(FormatError, match="count mismatch"):
        data.load_idx(tmp_path / "img", tmp_path / "lab")


def test_bad_magic_and_truncation(tmp_path):
    _write_raw(tmp_path / "img", 0x801, (10, 2, 2), bytes(40))
    _write_raw(tmp_path / "lab", 0x801, (10,), bytes(10))
    with pytest.raises(FormatError, match="magic") as info:
        data.load_idx(tmp_path / "img", tmp_path / "lab")
    assert info.value.offset == 0 and "img" in str(info.value)
    _write_raw(tmp_path / "img", 0x803, (10, 2, 2), bytes(39))
    with pytest.raises(FormatError, match="truncated"):
        data.load_idx(tmp_path / "img", tmp_path / "lab")


def test_gzipped_idx_is_transparent(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    data.write_idx(tmp_path / "a.gz", arr)
    assert (tmp_path / "a.gz").read_bytes()[:2] == b"\x1f\x8b"
    np.testing.assert_array_equal(data.read_idx(tmp_path / "a.gz"), arr)


def test_idx_round_trip_is_bit_exact(tmp_path, rng):
    src = data.Dataset(rng.integers(0, 256, size=(7, 1, 5, 6)) / 255.0, rng.integers(0, 4, 7), 4)
    data.save_idx(src, tmp_path / "i", tmp_path / "l")
    back = data.load_idx(tmp_path / "i", tmp_path / "l", num_classes=4)
    assert back.images.tobytes() == src.images.tobytes()
    np.testing.assert_array_equal(back.labels, src.labels)
    data.save_idx(back, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i").read_bytes() == (tmp_path / "i2").read_bytes()


def test_synth_blobs_is_deterministic_and_bounded():
    a = data.synth_blobs(3, 10, (1, 12, 12), seed=4)
    b = data.synth_blobs(3, 10, (1, 12, 12), seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tolist() == b.labels.tolist()
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert Counter(a.labels.tolist()) == {0: 10, 1: 10, 2: 10}


def test_synth_blobs_rejects_empty():
    with pytest.raises(DataError):
        data.synth_blobs(3, 0)


def test_two_class_blobs_are_linearly_separable():
    ds = data.synth_blobs(2, 200, (1, 28, 28), seed=0)
    assert lstsq_accuracy(ds.images, ds.labels) >= 0.99


def test_splits_are_disjoint_stratified_and_seeded():
    ds = data.synth_blobs(4, 30, (1, 8, 8), seed=1)
    a, e = data.make_splits(ds, 42, 50, seed=3)
    assert len(a) == 42 and len(e) == 50
    assert not set(a) & set(e)
    for idx in (a, e):
        counts = np.bincount(ds.labels[idx], minlength=4)
        assert counts.max() - counts.min() <= 1
    a2, e2 = data.make_splits(ds, 42, 50, seed=3)
    assert a.tolist() == a2.tolist() and e.tolist() == e2.tolist()


def test_splits_fall_back_when_a_class_is_short():
    labels = np.array([0] * 3 + [1] * 20)
    ds = data.Dataset(np.zeros((23, 1, 2, 2)), labels, 2)
    a, e = data.make_splits(ds, 10, 10, seed=0)
    assert len(a) == 10 and len(e) == 10 and not set(a) & set(e)


def test_splits_reject_oversized_requests():
    ds = data.synth_blobs(2, 5, (1, 4, 4))
    with pytest.raises(DataError):
        data.make_splits(ds, 6, 5)


def test_split_manifest_round_trip(tmp_path):
    splits = {"attack": np.array([3, 1]), "eval": np.array([0, 2])}
    data.write_split_manifest(tmp_path / "s.csv", splits)
    assert (tmp_path / "s.csv").read_text().splitlines()[:2] == ["index,split", "0,eval"]
    back = data.read_split_manifest(tmp_path / "s.csv")
    assert back["attack"].tolist() == [1, 3] and back["eval"].tolist() == [0, 2]


def _cfg(**kw):
    base = dict(large_batch=250, small_batch=10, traversals=4, inner_iters=None, epochs=1, seed=0)
    base.update(kw)
    return SimpleNamespace(**base)


def test_default_setting_gives_hundred_inner_batches():
    plan = data.plan_batches(500, _cfg())
    steps = list(plan)
    assert all(len(s.inner) == 100 for s in steps)


def test_reduction_setting_gives_one_inner_batch():
    plan = data.plan_batches(500, _cfg(small_batch=250, traversals=1))
    step = next(iter(plan))
    assert len(step.inner) == 1
    assert step.inner[0].tolist() == step.batch.tolist()


def test_small_batch_must_divide_large_batch():
    with pytest.raises(ConfigError):
        data.plan_batches(100, _cfg(small_batch=7))


def test_final_partial_batch_is_kept_with_rounded_up_schedule():
    steps = list(data.plan_batches(260, _cfg(large_batch=100, small_batch=10, traversals=3)))
    assert [len(s.batch) for s in steps] == [100, 100, 60]
    assert [len(s.inner) for s in steps] == [30, 30, 18]
    steps = list(data.plan_batches(255, _cfg(large_batch=100, small_batch=10, traversals=1)))
    assert len(steps[-1].inner) == 6  # ceil(55 / 10)
    assert sorted(np.concatenate(steps[-1].inner).tolist()) == sorted(steps[-1].batch.tolist())


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 300),
    lb_mult=st.integers(1, 10),
    sb=st.sampled_from([1, 2, 5]),
    k=st.integers(1, 4),
    epochs=st.integers(1, 3),
    seed=st.integers(0, 2**16),
)
def test_plan_coverage_invariants(n, lb_mult, sb, k, epochs, seed):
    lb = sb * lb_mult
    plan = data.plan_batches(n, _cfg(large_batch=lb, small_batch=sb, traversals=k, epochs=epochs, seed=seed))
    steps = list(plan)
    for e in range(epochs):
        outer = np.concatenate([s.batch for s in steps if s.epoch == e])
        assert sorted(outer.tolist()) == list(range(n))
    for s in steps:
        counts = Counter(np.concatenate(s.inner).tolist())
        assert set(counts) == set(s.batch.tolist())
        assert set(counts.values()) == {k}
        assert len(s.inner) == -(-k * len(s.batch) // sb)


def test_plans_are_deterministic_per_seed():
    a = [s.inner for s in data.plan_batches(120, _cfg(large_batch=50, small_batch=5, seed=2))]
    b = [s.inner for s in data.plan_batches(120, _cfg(large_batch=50, small_batch=5, seed=2))]
    assert all(np.array_equal(x, y) for xs, ys in zip(a, b) for x, y in zip(xs, ys))


def test_outer_order_is_independent_of_inner_schedule():
    a = [s.batch for s in data.plan_batches(120, _cfg(large_batch=50, small_batch=5, traversals=1))]
    b = [s.batch for s in data.plan_batches(120, _cfg(large_batch=50, small_batch=50, traversals=1))]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
