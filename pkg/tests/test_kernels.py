"""Parity between the compiled kernels and their pure-numpy fallbacks."""

import numpy as np
import pytest

from biasloss import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA,
                                reason="numba absent; only one path exists")


def both_paths(fn, *args):
    fast = fn(*args)
    K.HAVE_NUMBA = False
    try:
        slow = fn(*args)
    finally:
        K.HAVE_NUMBA = True
    return fast, slow


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_dw_conv_parity(dtype, stride):
    rng = np.random.default_rng(0)
    xp = rng.normal(size=(2, 3, 9, 9)).astype(dtype)
    w = rng.normal(size=(3, 3, 3)).astype(dtype)
    oh = ow = (9 - 3) // stride + 1
    # the compiled path accumulates in f64, the fallback in the array dtype,
    # so f32 parity is only up to single-precision rounding
    tol = 1e-4 if dtype == np.float32 else 1e-12
    (f, s) = both_paths(K.dw_conv_fwd, xp, w, stride, oh, ow)
    np.testing.assert_allclose(f, s, rtol=tol, atol=1e-6)
    g = rng.normal(size=(2, 3, oh, ow)).astype(dtype)
    (fx, fw), (sx, sw) = both_paths(K.dw_conv_bwd, xp, w, g, stride)
    np.testing.assert_allclose(fx, sx, rtol=tol, atol=1e-6)
    np.testing.assert_allclose(fw, sw, rtol=tol, atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bn_parity(dtype):
    rng = np.random.default_rng(1)
    x = rng.normal(1.0, 2.0, size=(4, 3, 5, 5)).astype(dtype)
    gamma = rng.normal(1.0, 0.1, size=3).astype(dtype)
    beta = rng.normal(size=3).astype(dtype)
    (fm, fv), (sm, sv) = both_paths(K.bn_stats, x)
    np.testing.assert_allclose(fm, sm, rtol=1e-12)
    # sq-sum vs two-pass variance differ at f32 input rounding scale
    np.testing.assert_allclose(fv, sv, rtol=1e-6)
    invstd = 1.0 / np.sqrt(fv + 1e-5)
    fo, so = both_paths(K.bn_normalize, x, fm, invstd, gamma, beta)
    np.testing.assert_allclose(fo, so, rtol=1e-4, atol=1e-6)
    g = rng.normal(size=x.shape).astype(dtype)
    (fdx, fdg, fdb), (sdx, sdg, sdb) = both_paths(
        K.bn_bwd_train, x, g, gamma, fm, invstd)
    np.testing.assert_allclose(fdx, sdx, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(fdg, sdg, rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(fdb, sdb, rtol=1e-4, atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_hswish_and_relu_parity(dtype):
    rng = np.random.default_rng(2)
    x = (rng.normal(size=(64,)) * 3).astype(dtype)
    g = rng.normal(size=(64,)).astype(dtype)
    fo, so = both_paths(K.hswish_fwd, x)
    np.testing.assert_allclose(fo, so, rtol=1e-6, atol=1e-7)
    fb, sb = both_paths(K.hswish_bwd, x, g)
    np.testing.assert_allclose(fb, sb, rtol=1e-6, atol=1e-7)
    fr, sr = both_paths(K.relu_bwd, x, g)
    np.testing.assert_array_equal(fr, sr)
