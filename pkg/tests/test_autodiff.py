import numpy as np
import pytest

from conftest import central_diff, check_grad_fd
from radsynth import autodiff as ad
from radsynth.errors import ConfigError, GraphError, ShapeError, StateError


def t(arr, grad=False):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def conv2d_loop(x, k, stride, pad):
    """Nested-loop direct convolution oracle."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    sh, sw = stride if isinstance(stride, tuple) else (stride, stride)
    ph, pw = pad if isinstance(pad, tuple) else (pad, pad)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[ni, ci, oy * sh + ky, ox * sw + kx] * k[fi, ci, ky, kx]
                    out[ni, fi, oy, ox] = acc
    return out


class TestConv2d:
    def test_all_ones(self):
        x = t(np.ones((1, 1, 3, 3)))
        k = t(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, k, stride=1, padding=0)
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    def test_identity_kernel(self, rng):
        x = t(rng.normal(size=(2, 1, 5, 5)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, t(k), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=0)

    def test_against_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        out = ad.conv2d(t(x), t(k), stride=1, padding=0)
        want = conv2d_loop(x, k, 1, 0)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_strided_padded_oracle(self, rng):
        x = rng.normal(size=(2, 3, 8, 7))
        k = rng.normal(size=(4, 3, 3, 3))
        out = ad.conv2d(t(x), t(k), stride=2, padding=1)
        want = conv2d_loop(x, k, 2, 1)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(t(rng.normal(size=(1, 2, 4, 4))), t(rng.normal(size=(1, 3, 2, 2))))

    def test_nonpositive_output(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(t(rng.normal(size=(1, 1, 2, 2))), t(rng.normal(size=(1, 1, 5, 5))))


class TestConvTranspose2d:
    def test_single_pixel_spread(self):
        v = 3.0
        k = np.arange(4, dtype=np.float64).reshape(1, 1, 2, 2)
        out = ad.conv_transpose2d(t(np.full((1, 1, 1, 1), v)), t(k), stride=2, padding=0)
        np.testing.assert_allclose(out.data, v * k)

    def test_shape_arithmetic(self, rng):
        x = t(rng.normal(size=(1, 3, 64, 64)))
        k = t(rng.normal(size=(3, 2, 4, 4)))
        out = ad.conv_transpose2d(x, k, stride=2, padding=1)
        assert out.shape == (1, 2, 128, 128)

    def test_adjoint_identity(self, rng):
        for _ in range(5):
            x = rng.normal(size=(2, 3, 8, 8))
            k = rng.normal(size=(4, 3, 4, 4))
            y = ad.conv2d(t(x), t(k), stride=2, padding=1)
            probe = rng.normal(size=y.shape)
            lhs = float((y.data * probe).sum())
            back = ad.conv_transpose2d(t(probe), t(k), stride=2, padding=1)
            rhs = float((x * back.data).sum())
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestNormalization:
    def test_instance_norm_constant_channel(self):
        x = t(np.full((2, 3, 4, 4), 7.0))
        out = ad.instance_norm2d(x, t(np.ones(3)), t(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_instance_norm_statistics(self, rng):
        # eps=1e-5 biases the variance by eps/var; use variance >> eps
        x = t(rng.normal(0.0, 15.0, size=(2, 3, 6, 6)))
        out = ad.instance_norm2d(x, t(np.ones(3)), t(np.zeros(3)))
        means = out.data.mean(axis=(2, 3))
        variances = out.data.var(axis=(2, 3))
        assert np.abs(means).max() < 1e-10
        assert np.abs(variances - 1.0).max() < 1e-6

    def test_instance_norm_loop_oracle(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        gamma = rng.normal(size=3)
        beta = rng.normal(size=3)
        eps = 1e-5
        out = ad.instance_norm2d(t(x), t(gamma), t(beta), eps)
        want = np.zeros_like(x)
        for n in range(2):
            for c in range(3):
                plane = x[n, c]
                mu = plane.mean()
                var = ((plane - mu) ** 2).mean()
                want[n, c] = (plane - mu) / np.sqrt(var + eps) * gamma[c] + beta[c]
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_batch_norm_constant(self):
        x = t(np.full((4, 2, 3, 3), -2.5))
        out = ad.batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), mode="train")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_batch_norm_statistics(self, rng):
        x = t(rng.normal(3.0, 12.0, size=(4, 2, 5, 5)))
        out = ad.batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), mode="train")
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-10
        assert np.abs(out.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-6

    def test_batch_norm_loop_oracle(self, rng):
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)
        eps = 1e-5
        out = ad.batch_norm2d(t(x), t(gamma), t(beta), eps, mode="train")
        want = np.zeros_like(x)
        for c in range(2):
            vals = x[:, c]
            mu = vals.mean()
            var = ((vals - mu) ** 2).mean()
            want[:, c] = (vals - mu) / np.sqrt(var + eps) * gamma[c] + beta[c]
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_batch_norm_running_stats(self, rng):
        running = ad.RunningStats(2)
        x = rng.normal(1.0, 2.0, size=(8, 2, 4, 4))
        ad.batch_norm2d(t(x), t(np.ones(2)), t(np.zeros(2)), mode="train", running=running)
        assert running.initialized
        out = ad.batch_norm2d(t(x), t(np.ones(2)), t(np.zeros(2)), mode="eval", running=running)
        assert out.shape == x.shape

    def test_batch_norm_eval_uninitialized(self, rng):
        x = t(rng.normal(size=(2, 2, 4, 4)))
        with pytest.raises(StateError):
            ad.batch_norm2d(x, t(np.ones(2)), t(np.zeros(2)), mode="eval",
                            running=ad.RunningStats(2))


class TestActivations:
    def test_leaky_relu_negative(self):
        assert ad.leaky_relu(t([-1.0]), 0.2).data[0] == pytest.approx(-0.2)

    def test_tanh_zero(self):
        assert ad.tanh(t([0.0])).data[0] == 0.0

    def test_relu_negative(self):
        assert ad.relu(t([-3.0])).data[0] == 0.0

    def test_activation_dispatch(self):
        x = t([-2.0, 2.0])
        np.testing.assert_allclose(ad.activation(x, "relu").data, [0.0, 2.0])
        np.testing.assert_allclose(ad.activation(x, "leaky_relu", 0.1).data, [-0.2, 2.0])
        np.testing.assert_allclose(ad.activation(x, "tanh").data, np.tanh([-2.0, 2.0]))
        with pytest.raises(ConfigError):
            ad.activation(x, "gelu")

    def test_leaky_slope_range(self):
        with pytest.raises(ConfigError):
            ad.leaky_relu(t([1.0]), slope=1.5)


class TestGrad:
    def test_sum_square(self, rng):
        x = t(rng.normal(size=7), grad=True)
        g = ad.grad(ad.tsum(x * x), x)
        np.testing.assert_allclose(g.data, 2 * x.data, atol=1e-12)

    def test_second_order_cubic(self, rng):
        x = t(rng.normal(size=5), grad=True)
        g1 = ad.grad(ad.tsum(x * x * x), x, create_graph=True)
        g2 = ad.grad(ad.tsum(g1), x)
        np.testing.assert_allclose(g2.data, 6 * x.data, atol=1e-10)

    def test_three_layer_conv_net_fd(self, rng):
        x = t(rng.normal(size=(1, 1, 8, 8)), grad=True)
        k1 = t(rng.normal(0, 0.5, size=(3, 1, 3, 3)), grad=True)
        k2 = t(rng.normal(0, 0.5, size=(4, 3, 3, 3)), grad=True)
        k3 = t(rng.normal(0, 0.5, size=(1, 4, 4, 4)), grad=True)

        def loss():
            h1 = ad.leaky_relu(ad.conv2d(x, k1, 2, 1))
            h2 = ad.leaky_relu(ad.conv2d(h1, k2, 1, 1))
            return ad.tmean(ad.tanh(ad.conv2d(h2, k3, 1, 0)))

        check_grad_fd(loss, [x, k1, k2, k3], rng, probes=6, rtol=1e-4)

    def test_non_scalar_rejected(self, rng):
        x = t(rng.normal(size=3), grad=True)
        with pytest.raises(ShapeError):
            ad.grad(x * x, x)

    def test_off_graph_rejected(self, rng):
        x = t(rng.normal(size=3), grad=True)
        y = t(rng.normal(size=3), grad=True)
        with pytest.raises(GraphError):
            ad.grad(ad.tsum(x * x), y)

    def test_no_grad_tensor_rejected(self, rng):
        x = t(rng.normal(size=3), grad=True)
        c = t(rng.normal(size=3))
        with pytest.raises(GraphError):
            ad.grad(ad.tsum(x * c), c)


ELEMENTWISE_CASES = [
    ("add", lambda a, b: a + b, 2),
    ("sub", lambda a, b: a - b, 2),
    ("mul", lambda a, b: a * b, 2),
    ("div", lambda a, b: a / (b * b + 1.0), 2),
    ("pow3", lambda a, b: (a * a + 1.0) ** 3, 1),
    ("sqrt", lambda a, b: ad.sqrt(a * a + 1.0), 1),
    ("tanh", lambda a, b: ad.tanh(a), 1),
    ("exp", lambda a, b: ad.exp(a), 1),
]


@pytest.mark.parametrize("name,fn,arity", ELEMENTWISE_CASES)
def test_elementwise_gradients_match_fd(name, fn, arity, rng):
    a = t(rng.normal(size=(3, 4)), grad=True)
    b = t(rng.normal(size=(3, 4)), grad=True)
    wrt = [a, b][:arity]
    check_grad_fd(lambda: ad.tmean(fn(a, b) ** 2), wrt, rng, probes=5, rtol=1e-4)


def test_piecewise_gradients_away_from_kink(rng):
    base = rng.uniform(0.5, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    a = t(base, grad=True)
    check_grad_fd(lambda: ad.tmean(ad.relu(a) ** 2 + 1.0), [a], rng, probes=6)
    check_grad_fd(lambda: ad.tmean(ad.leaky_relu(a, 0.2) ** 2), [a], rng, probes=6)


def test_matmul_and_reductions_fd(rng):
    a = t(rng.normal(size=(4, 3)), grad=True)
    b = t(rng.normal(size=(3, 5)), grad=True)
    check_grad_fd(lambda: ad.tmean((a @ b) ** 2), [a, b], rng, probes=6)
    c = t(rng.normal(size=(2, 3, 4)), grad=True)
    check_grad_fd(lambda: ad.tsum(ad.tmean(c, axis=(0, 2)) ** 2), [c], rng, probes=6)


def test_broadcast_add_fd(rng):
    a = t(rng.normal(size=(4, 3)), grad=True)
    bias = t(rng.normal(size=(3,)), grad=True)
    check_grad_fd(lambda: ad.tmean((a + bias) ** 2), [a, bias], rng, probes=6)


def test_second_order_fd_through_norm(rng):
    """Gradient-of-gradient quantities match FD within 1e-3."""
    w = t(rng.normal(0, 0.5, size=(2, 1, 3, 3)), grad=True)
    xv = rng.normal(size=(2, 1, 6, 6))

    def gp_like():
        x = t(xv, grad=True)
        score = ad.tsum(ad.tanh(ad.conv2d(x, w, 1, 1)))
        gx = ad.grad(score, x, create_graph=True)
        norm = ad.sqrt(ad.tsum(gx * gx, axis=(1, 2, 3)) + 1e-12)
        return ad.tmean((norm - 1.0) ** 2)

    check_grad_fd(gp_like, [w], rng, probes=8, rtol=1e-3)


def test_tape_determinism(rng):
    xv = rng.normal(size=(2, 2, 6, 6))
    kv = rng.normal(size=(3, 2, 3, 3))

    def run():
        x = t(xv, grad=True)
        k = t(kv, grad=True)
        out = ad.tmean(ad.tanh(ad.conv2d(x, k, 2, 1)) ** 2)
        gx, gk = ad.grad(out, [x, k])
        return out.item(), gx.data.copy(), gk.data.copy()

    o1, gx1, gk1 = run()
    o2, gx2, gk2 = run()
    assert o1 == o2
    np.testing.assert_array_equal(gx1, gx2)
    np.testing.assert_array_equal(gk1, gk2)


def test_requires_grad_false_never_receives_grad(rng):
    x = t(rng.normal(size=3), grad=True)
    c = t(np.array([2.0, 3.0, 4.0]))
    out = ad.tsum(x * c)
    g = ad.grad(out, x)
    np.testing.assert_allclose(g.data, c.data)
    assert not c.requires_grad
