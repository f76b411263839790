"""Property-based checks across modules."""
import tempfile
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from viptt.dataset import Dataset, SampleRecord, class_weights, stratified_split
from viptt.preprocess import ResizeSpec, SplineOrder, rotate_axial, siz_resize, spline_interp_1d
from viptt.volume_io import Domain, Volume, read_tensor, write_tensor

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)
shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


@settings(max_examples=50, deadline=None)
@given(shapes.flatmap(lambda s: arrays(np.float32, s, elements=finite32)))
def test_tensor_round_trip(arr):
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "t.vpt"
        write_tensor(path, arr)
        back = read_tensor(path)
    assert back.dtype == np.float32 and back.shape == arr.shape
    assert np.array_equal(back, arr)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.floats(-5, 5), st.floats(-5, 5),
       st.lists(st.floats(0, 1), min_size=1, max_size=6), st.sampled_from(list(SplineOrder)))
def test_splines_reproduce_lines(n, a, b, fracs, order):
    y = a + b * np.arange(n)
    q = np.array(fracs) * (n - 1)
    assert np.allclose(spline_interp_1d(y, q, order), a + b * q, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.tuples(st.integers(2, 6), st.integers(2, 6), st.integers(2, 6)),
       st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)),
       st.sampled_from(list(SplineOrder)), st.integers(0, 2 ** 32 - 1))
def test_resize_shape_and_range(src, tgt, order, seed):
    data = np.random.default_rng(seed).random(src)
    out = siz_resize(Volume(data, Domain.UNIT_NORMALIZED), ResizeSpec(tgt, order)).data
    assert out.shape == tgt
    assert out.min() >= 0.0 and out.max() <= 1.0
    if order is SplineOrder.LINEAR:
        # linear interpolation never leaves the sample range
        assert out.min() >= data.min() - 1e-12 and out.max() <= data.max() + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-180, 180), st.integers(3, 9), st.integers(3, 9))
def test_rotation_stays_in_range(seed, angle, h, w):
    data = np.random.default_rng(seed).random((2, h, w))
    out = rotate_axial(Volume(data, Domain.UNIT_NORMALIZED), angle).data
    assert out.shape == data.shape
    assert out.min() >= 0.0 and out.max() <= data.max() + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 30), min_size=2, max_size=6), st.floats(0.05, 0.95), st.integers(0, 2 ** 32 - 1))
def test_split_partitions_every_class(counts, frac, seed):
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    ds = Dataset([SampleRecord(Path(f"{i}.vpt"), c) for i, c in enumerate(labels)], len(counts), (1, 1, 1))
    tr, va = stratified_split(ds, frac, seed)
    assert sorted(r.data_path.name for r in tr.records + va.records) == sorted(r.data_path.name for r in ds.records)
    assert set(tr.records).isdisjoint(va.records)
    assert np.all(tr.class_counts() >= 1) and np.all(va.class_counts() >= 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=8))
def test_class_weight_invariant(counts):
    labels = np.repeat(np.arange(len(counts)), counts)
    w = class_weights(labels, len(counts))
    assert np.all(w > 0)
    assert abs(float(np.sum(w * np.array(counts))) - labels.size) < 1e-12 * labels.size
    # rarer classes never get smaller weights
    order = np.argsort(counts, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-12)
