"""Logistic loss, per-example gradients, clipping and LIBSVM I/O."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from asyncfl.objective import (Dataset, Objective, ObjectiveError, accuracy, clip, grad,
                               load_libsvm, loss, sigmoid, write_libsvm)

from conftest import synthetic_dataset


def dense_loss(obj, w, X, y):
    z = X @ w[:-1] + w[-1]
    p = np.clip(1 / (1 + np.exp(-z)), 1e-12, 1 - 1e-12)
    ce = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return ce.mean() + 0.5 * obj.lam * w[:-1] @ w[:-1]


def test_zero_model_loss_is_log2(small_dataset):
    obj = Objective(lam=0.0)
    assert loss(obj, obj.zeros(small_dataset), small_dataset) == pytest.approx(math.log(2), abs=1e-15)


def test_loss_matches_dense_formula(small_dataset):
    obj = Objective(lam=0.3)
    w = np.random.default_rng(0).normal(size=obj.model_dim(small_dataset))
    X, y = small_dataset.dense(), small_dataset.labels
    assert loss(obj, w, small_dataset) == pytest.approx(dense_loss(obj, w, X, y), rel=1e-12)


def test_sparse_rows_including_empty():
    X = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, -2.0], [0.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
    y = np.array([1, 0, 0, 1])
    ds = Dataset.from_dense(X, y)
    obj = Objective(lam=0.1)
    w = np.array([0.5, -0.25, 1.0, 0.2])
    assert loss(obj, w, ds) == pytest.approx(dense_loss(obj, w, X, y), rel=1e-13)


def test_gradient_matches_finite_differences(small_dataset):
    obj = Objective(lam=0.05)
    rng = np.random.default_rng(3)
    w = rng.normal(size=obj.model_dim(small_dataset))
    for j in (0, 17, 199):
        single = small_dataset.subset([j])
        g = grad(obj, w, small_dataset, j)
        h = 1e-6
        fd = np.array([(loss(obj, w + h * e, single) - loss(obj, w - h * e, single)) / (2 * h)
                       for e in np.eye(w.size)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_mean_gradient_is_full_gradient(small_dataset):
    obj = Objective(lam=0.2)
    w = np.random.default_rng(5).normal(size=obj.model_dim(small_dataset))
    mean = np.mean([grad(obj, w, small_dataset, j) for j in range(small_dataset.size)], axis=0)
    h = 1e-6
    fd = np.array([(loss(obj, w + h * e, small_dataset) - loss(obj, w - h * e, small_dataset))
                   / (2 * h) for e in np.eye(w.size)])
    np.testing.assert_allclose(mean, fd, rtol=1e-6, atol=1e-8)


def test_strong_convexity_gap(small_dataset):
    obj = Objective(lam=0.5)
    rng = np.random.default_rng(9)
    full = lambda w: np.mean([grad(obj, w, small_dataset, j) for j in range(small_dataset.size)],
                             axis=0)
    for _ in range(5):
        w, v = rng.normal(size=(2, obj.model_dim(small_dataset)))
        gap = loss(obj, v, small_dataset) - loss(obj, w, small_dataset) - full(w) @ (v - w)
        assert gap >= 0.5 * obj.mu * np.sum((v - w)[:-1] ** 2) - 1e-10


def test_dimension_mismatch(small_dataset):
    with pytest.raises(ObjectiveError):
        loss(Objective(), np.zeros(3), small_dataset)


def test_sigmoid_extremes():
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_loss_finite_for_huge_margins():
    ds = Dataset.from_dense(np.array([[1.0], [1.0]]), [0, 1])
    assert math.isfinite(loss(Objective(), np.array([1e6, 0.0]), ds))


def test_clip_identity_below_threshold():
    g = np.array([0.3, 0.4])
    assert clip(g, 0.5) is g
    np.testing.assert_allclose(clip(g, 0.1), g * 0.2)
    with pytest.raises(ObjectiveError):
        clip(g, 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)),
       st.floats(1e-3, 1e3))
def test_clip_norm_bound(g, C):
    out = clip(g, C)
    assert np.linalg.norm(out) <= C * (1 + 1e-12)
    if np.linalg.norm(g) > 0:
        # direction is preserved
        assert np.dot(out, g) >= 0


def test_accuracy_threshold_at_zero_margin():
    ds = Dataset.from_dense(np.array([[0.0], [1.0], [-1.0]]), [1, 1, 0])
    assert accuracy(Objective(), np.array([1.0, 0.0]), ds) == 1.0


def test_libsvm_roundtrip(tmp_path):
    ds = synthetic_dataset(30, 5, seed=2, density=0.5)
    path = tmp_path / "d.libsvm"
    write_libsvm(ds, path)
    back = load_libsvm(path, dimension_hint=5)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_allclose(back.dense(), ds.dense(), rtol=1e-15)


def test_libsvm_label_mapping_and_errors(tmp_path):
    p = tmp_path / "a.libsvm"
    p.write_text("+1 1:0.5 3:2\n-1 2:1\n")
    ds = load_libsvm(p)
    assert list(ds.labels) == [1, 0] and ds.dimension == 3
    p.write_text("1 0:1\n")
    with pytest.raises(ObjectiveError):
        load_libsvm(p)


def test_breast_cancer_fixture(breast_cancer):
    assert breast_cancer.size == 569 and breast_cancer.dimension == 30
    assert set(np.unique(breast_cancer.labels)) == {0, 1}


# --------------------------------------------------------------------------
# invariants


def test_gradient_random_probes(small_dataset):
    obj = Objective(lam=0.1)
    rng = np.random.default_rng(21)
    h = 1e-6
    for _ in range(100):
        w = rng.normal(size=obj.model_dim(small_dataset))
        j = int(rng.integers(small_dataset.size))
        e = rng.normal(size=w.size)
        single = small_dataset.subset([j])
        fd = (loss(obj, w + h * e, single) - loss(obj, w - h * e, single)) / (2 * h)
        an = float(grad(obj, w, small_dataset, j) @ e)
        assert abs(fd - an) <= 1e-5 * max(1.0, abs(an))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_convex_along_segments(seed):
    ds = synthetic_dataset(40, 3, seed=8)
    obj = Objective(lam=0.01)
    a, b = np.random.default_rng(seed).normal(scale=3.0, size=(2, 4))
    assert loss(obj, (a + b) / 2, ds) <= 0.5 * (loss(obj, a, ds) + loss(obj, b, ds)) + 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-2, 1e2))
def test_clip_idempotent(g, C):
    once = clip(g, C)
    assert np.array_equal(clip(once, C), once)


def test_regularizer_separates(small_dataset):
    w = np.random.default_rng(1).normal(size=7)
    lam = 0.37
    with_reg = loss(Objective(lam=lam), w, small_dataset)
    plain = loss(Objective(lam=0.0), w, small_dataset)
    # one addition and one subtraction: at most a couple of ulps apart
    assert abs((with_reg - 0.5 * lam * float(w[:-1] @ w[:-1])) - plain) <= 2 * math.ulp(with_reg)


def test_accuracy_conventions():
    X = np.array([[1.0], [2.0], [-1.0], [-3.0]])
    y = np.array([1, 1, 0, 0])
    ds = Dataset.from_dense(X, y)
    obj = Objective()
    assert accuracy(obj, np.zeros(2), ds) == 0.5          # ties go to class 1
    perfect = np.array([1.0, 0.0])
    assert accuracy(obj, perfect, ds) == 1.0
    assert accuracy(obj, -perfect, ds) == 0.0
    with pytest.raises(ObjectiveError):
        accuracy(obj, np.zeros(3), ds)


def test_libsvm_examples(tmp_path):
    p = tmp_path / "x.libsvm"
    p.write_text("+1 3:0.5\n")
    ds = load_libsvm(p)
    assert ds.size == 1 and ds.labels[0] == 1 and ds.dense()[0, 2] == 0.5
    p.write_text("0 1:1\n1 2:2\n")
    assert list(load_libsvm(p).labels) == [0, 1]
    p.write_text("abc\n")
    with pytest.raises(ObjectiveError, match="line 1"):
        load_libsvm(p)
    p.write_text("")
    with pytest.raises(ObjectiveError):
        load_libsvm(p)
