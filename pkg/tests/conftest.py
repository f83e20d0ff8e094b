import numpy as np
import pytest

from radsynth import autodiff as ad


def central_diff(fn, array, index, h=1e-4):
    """Scalar central finite difference of fn() w.r.t. array[index]."""
    orig = array[index]
    array[index] = orig + h
    fp = fn()
    array[index] = orig - h
    fm = fn()
    array[index] = orig
    return (fp - fm) / (2 * h)


def check_grad_fd(fn, tensors, rng, probes=8, h=1e-4, rtol=1e-4):
    """Compare reverse-mode gradients of the scalar fn(tensors...) against
    central differences at randomly probed coordinates."""
    loss = fn()
    grads = ad.grad(loss, list(tensors))
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.data.reshape(-1)
        k = min(probes, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            fd = central_diff(lambda: fn().item(), flat, idx, h)
            scale = max(abs(fd), abs(gflat[idx]), 1e-6)
            worst = max(worst, abs(fd - gflat[idx]) / scale)
    assert worst <= rtol, f"finite-difference mismatch: {worst:.3e} > {rtol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
