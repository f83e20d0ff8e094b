"""The compiled and NumPy kernel implementations must agree; the patch
extraction pair must be mutually adjoint."""

import numpy as np
import pytest

from radsynth import _kernels
from radsynth._kernels import _py

try:
    from radsynth._kernels import _cy
    IMPLS = [_py, _cy]
except ImportError:
    _cy = None
    IMPLS = [_py]

CASES = [
    # (n, c, h, w, kh, kw, sh, sw, ph, pw)
    (1, 1, 5, 5, 3, 3, 1, 1, 0, 0),
    (2, 3, 8, 7, 3, 2, 2, 1, 1, 0),
    (1, 2, 6, 6, 4, 4, 2, 2, 1, 1),
    (3, 1, 4, 9, 1, 3, 1, 3, 0, 2),
]


@pytest.mark.parametrize("case", CASES)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_impls_agree(case, dtype, rng):
    n, c, h, w, kh, kw, sh, sw, ph, pw = case
    x = rng.normal(size=(n, c, h, w)).astype(dtype)
    results = [impl.im2col(x, kh, kw, sh, sw, ph, pw) for impl in IMPLS]
    for r in results[1:]:
        np.testing.assert_array_equal(results[0], r)
    assert results[0].dtype == dtype


@pytest.mark.parametrize("case", CASES)
def test_col2im_impls_agree(case, rng):
    n, c, h, w, kh, kw, sh, sw, ph, pw = case
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    cols = rng.normal(size=(n, c * kh * kw, oh * ow))
    results = [impl.col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw) for impl in IMPLS]
    for r in results[1:]:
        np.testing.assert_allclose(results[0], r, atol=1e-12)


@pytest.mark.parametrize("case", CASES)
def test_im2col_col2im_adjoint(case, rng):
    n, c, h, w, kh, kw, sh, sw, ph, pw = case
    x = rng.normal(size=(n, c, h, w))
    cols = _kernels.im2col(x, kh, kw, sh, sw, ph, pw)
    probe = rng.normal(size=cols.shape)
    back = _kernels.col2im(probe, n, c, h, w, kh, kw, sh, sw, ph, pw)
    lhs = float((cols * probe).sum())
    rhs = float((x * back).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("kind", [True, False])
def test_diffusion_step_impls_agree(kind, rng):
    img = rng.normal(120, 30, size=(17, 23))
    results = [impl.diffusion_step(img, 15.0, 0.15, kind) for impl in IMPLS]
    for r in results[1:]:
        np.testing.assert_allclose(results[0], r, atol=1e-12)


def test_resize_impls_agree(rng):
    img = rng.normal(100, 40, size=(19, 31))
    results = [impl.bilinear_resize(img, 9, 45) for impl in IMPLS]
    for r in results[1:]:
        np.testing.assert_allclose(results[0], r, atol=1e-12)


def test_backend_selection_env(monkeypatch):
    assert _kernels.BACKEND in ("cython", "numpy")
