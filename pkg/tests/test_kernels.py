import importlib
import os

import numpy as np
import pytest

from tsadv import _fallback, kernels


def _compiled():
    try:
        return importlib.import_module("tsadv._ext")
    except ImportError:
        pytest.skip("compiled extension not built")


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "numpy")
    if os.environ.get("TSADV_PURE"):
        assert kernels.BACKEND == "numpy"


def test_elman_forward_backward_match():
    ext = _compiled()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 9, 5))
    w, u, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 6)) * 0.3, rng.normal(size=6)
    h1, h2 = ext.elman_forward(x, w, u, b), _fallback.elman_forward(x, w, u, b)
    np.testing.assert_allclose(h1, h2, rtol=0, atol=1e-12)
    dh = rng.normal(size=h1.shape)
    for a, c in zip(ext.elman_backward(x, h1, w, u, dh), _fallback.elman_backward(x, h2, w, u, dh)):
        np.testing.assert_allclose(a, c, rtol=0, atol=1e-12)


def test_l1_projection_match():
    ext = _compiled()
    v = np.random.default_rng(1).normal(size=(20, 33))
    for r in (0.01, 1.0, 100.0):
        np.testing.assert_allclose(ext.project_l1_rows(v, r), _fallback.project_l1_rows(v, r), atol=1e-12)


def test_l1_projection_ties_and_sparse_rows():
    ext = _compiled()
    rng = np.random.default_rng(3)
    rows = [np.full(240, 0.1), np.r_[np.full(5, 1 / 3), np.zeros(235)], np.r_[np.full(3, 0.7), -np.full(3, 0.7)]]
    rows += [np.round(rng.normal(size=240), 1) for _ in range(50)]
    rows += [np.where(rng.random(240) < 0.02, rng.choice([-0.5, 0.5], 240), 0.0) for _ in range(50)]
    for v in rows:
        v = np.atleast_2d(v)
        for r in (1e-9, 0.1, 0.35, 1.0, 2.0):
            got, want = ext.project_l1_rows(v, r), _fallback.project_l1_rows(v, r)
            np.testing.assert_allclose(got, want, atol=1e-12)
            assert np.abs(got).sum() <= r + 1e-9 or np.abs(v).sum() <= r


def test_rolling_match():
    ext = _compiled()
    x = np.random.default_rng(2).normal(size=300)
    for w in (1, 5, 50):
        for a, b in zip(ext.rolling_mean_std(x, w), _fallback.rolling_mean_std(x, w)):
            np.testing.assert_allclose(a, b, atol=1e-12)


def test_rolling_against_naive():
    x = np.random.default_rng(3).normal(size=40)
    mean, std = kernels.rolling_mean_std(x, 7)
    assert len(mean) == 34
    for i in range(34):
        assert mean[i] == pytest.approx(x[i : i + 7].mean(), abs=1e-12)
        assert std[i] == pytest.approx(x[i : i + 7].std(), abs=1e-12)
