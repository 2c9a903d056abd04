import os
import subprocess
import sys

import numpy as np
import pytest

from pstune import kernels

try:
    compiled = kernels.get_backend("cython")
except ImportError:
    compiled = None

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")
pure = kernels.get_backend("python")


def _data(kind, n=64, d=7, seed=0):
    rng = np.random.default_rng(seed)
    if kind == kernels.QUADRATIC:
        X = rng.uniform(0.1, 3.0, (n, d))
    else:
        X = rng.standard_normal((n, d))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    w = rng.standard_normal(d)
    return X, y, w


@needs_compiled
@pytest.mark.parametrize("kind", [kernels.QUADRATIC, kernels.LOGISTIC, kernels.HINGE])
@pytest.mark.parametrize("l2", [0.0, 0.3])
def test_loss_grad_backends_agree(kind, l2):
    X, y, w = _data(kind)
    idx = np.array([3, 17, 17, 40, 63], dtype=np.int64)
    ga, gb = np.empty(7), np.empty(7)
    la = pure.loss_grad(kind, X, y, idx, w, l2, ga)
    lb = compiled.loss_grad(kind, X, y, idx, w, l2, gb)
    assert la == pytest.approx(lb, rel=1e-12)
    np.testing.assert_allclose(ga, gb, rtol=1e-12, atol=1e-14)


@needs_compiled
@pytest.mark.parametrize("kind", [kernels.QUADRATIC, kernels.LOGISTIC, kernels.HINGE])
def test_example_losses_backends_agree(kind):
    X, y, w = _data(kind, seed=2)
    np.testing.assert_allclose(pure.example_losses(kind, X, y, w),
                               np.asarray(compiled.example_losses(kind, X, y, w)), rtol=1e-12)


@needs_compiled
def test_matern_backends_agree():
    rng = np.random.default_rng(5)
    A, B = rng.random((9, 3)), rng.random((4, 3))
    inv = np.array([2.0, 0.5, 1.3])
    np.testing.assert_allclose(pure.matern52_gram(A, B, inv, 1.7),
                               np.asarray(compiled.matern52_gram(A, B, inv, 1.7)), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("kind", [kernels.QUADRATIC, kernels.LOGISTIC, kernels.HINGE])
def test_gradient_matches_finite_differences(kind):
    X, y, w = _data(kind, seed=7)
    if kind == kernels.HINGE:
        w = w * 0.01  # keep every margin away from the kink
    idx = np.arange(10, dtype=np.int64)
    g = np.empty(len(w))
    kernels.loss_grad(kind, X, y, idx, w, 0.2, g)
    h = 1e-6
    num = np.empty(len(w))
    for k in range(len(w)):
        e = np.zeros(len(w))
        e[k] = h
        num[k] = (kernels.loss_grad(kind, X, y, idx, w + e, 0.2, np.empty(len(w)))
                  - kernels.loss_grad(kind, X, y, idx, w - e, 0.2, np.empty(len(w)))) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-7)


def test_unknown_backend_name():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_env_var_forces_numpy_backend():
    env = {**os.environ, "PSTUNE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "import pstune; print(pstune.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_backend_active_by_default():
    env = {k: v for k, v in os.environ.items() if k != "PSTUNE_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", "import pstune; print(pstune.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"
