import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msflow import tensor as T
from msflow.gradcheck import check_gradients
from msflow.io import FormatError, read_tensor, write_tensor


def loop_conv(x, k, b, dilation, padding, stride):
    """Nested-loop direct convolution, independent of the library path."""
    n, c, h, w = x.shape
    o, _, kk, _ = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - dilation * (kk - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kk - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for q in range(o):
            for y in range(ho):
                for xx in range(wo):
                    s = b[q]
                    for ci in range(c):
                        for i in range(kk):
                            for j in range(kk):
                                s += k[q, ci, i, j] * xp[a, ci, y * stride + i * dilation, xx * stride + j * dilation]
                    out[a, q, y, xx] = s
    return out


class TestConv2d:
    def test_center_tap_is_identity(self):
        x = T.tensor(np.random.default_rng(0).normal(size=(1, 1, 5, 5)))
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1
        out = T.conv2d(x, T.tensor(k), T.tensor(np.zeros(1)), dilation=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_ramp_matches_loop_oracle(self):
        x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
        k = np.ones((1, 1, 3, 3), np.float32)
        out = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(np.zeros(1)), dilation=2, padding=2)
        expected = loop_conv(x, k, np.zeros(1), 2, 2, 1)
        np.testing.assert_array_equal(out.data, expected.astype(np.float32))
        # frozen values from the loop oracle
        assert expected[0, 0, 2, 2] == 108.0
        assert expected[0, 0, 0, 0] == 24.0

    @pytest.mark.parametrize("dilation,padding,stride", [(1, 0, 1), (2, 1, 1), (3, 3, 2), (1, 1, 2)])
    def test_random_matches_loop_oracle(self, dilation, padding, stride):
        rng = np.random.default_rng(dilation * 10 + stride)
        x = rng.normal(size=(2, 2, 9, 8)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        out = T.conv2d(T.tensor(x), T.tensor(k), T.tensor(b), dilation, padding, stride)
        np.testing.assert_allclose(out.data, loop_conv(x, k, b, dilation, padding, stride), rtol=1e-6, atol=1e-5)

    def test_direct_and_im2col_agree_exactly(self):
        rng = np.random.default_rng(1)
        for d in range(1, 6):
            x = T.tensor(rng.normal(size=(2, 4, 16, 16)).astype(np.float32))
            k = T.tensor(rng.normal(size=(5, 4, 3, 3)).astype(np.float32))
            b = T.tensor(rng.normal(size=5).astype(np.float32))
            a = T.conv2d(x, k, b, dilation=d, padding=d, impl="im2col")
            c = T.conv2d(x, k, b, dilation=d, padding=d, impl="direct")
            np.testing.assert_array_equal(a.data, c.data)

    def test_dilation_equals_zero_upsampled_kernel(self):
        rng = np.random.default_rng(2)
        x = np.round(rng.normal(size=(1, 2, 12, 12)) * 8).astype(np.float32)
        k = np.round(rng.normal(size=(2, 2, 3, 3)) * 8).astype(np.float32)
        for d in (2, 3):
            big = np.zeros((2, 2, 2 * d + 1, 2 * d + 1), np.float32)
            big[:, :, ::d, ::d] = k
            a = T.conv2d(T.tensor(x), T.tensor(k), None, dilation=d, padding=d)
            b = T.conv2d(T.tensor(x), T.tensor(big), None, dilation=1, padding=d)
            np.testing.assert_array_equal(a.data, b.data)

    def test_gradients_dilation_3(self):
        rng = np.random.default_rng(3)
        x = T.tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32))
        k = T.tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32))
        b = T.tensor(rng.normal(size=3).astype(np.float32))
        errs = check_gradients(lambda: T.conv2d(x, k, b, dilation=3, padding=3), [x, k, b])
        assert max(errs) < 1e-4

    def test_errors(self):
        x = T.tensor(np.zeros((1, 2, 5, 5)))
        with pytest.raises(T.ShapeError, match="in_channels"):
            T.conv2d(x, T.tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError, match="dilation"):
            T.conv2d(x, T.tensor(np.zeros((1, 2, 3, 3))), dilation=0)
        with pytest.raises(ValueError, match="stride"):
            T.conv2d(x, T.tensor(np.zeros((1, 2, 3, 3))), stride=0)
        with pytest.raises(T.ShapeError, match="height"):
            T.conv2d(x, T.tensor(np.zeros((1, 2, 3, 3))), dilation=3)


class TestElementwise:
    def test_relu(self):
        x = T.tensor(-np.abs(np.random.default_rng(0).normal(size=10)) - 0.1)
        assert np.all(T.relu(x).data == 0)
        y = T.tensor(np.abs(np.random.default_rng(1).normal(size=10)))
        np.testing.assert_array_equal(T.relu(y).data, y.data)

    def test_relu_subgradient_zero(self):
        x = T.tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        T.relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(T.softmax(T.tensor(np.full(4, 3.0))).data, 0.25)

    def test_sigmoid_zero(self):
        assert T.sigmoid(T.tensor(np.zeros(1))).data[0] == 0.5

    @pytest.mark.parametrize("name", ["relu", "sigmoid", "softmax", "exp", "log", "sqrt", "norm",
                                      "l2norm", "max_pool2", "upsample2", "linear", "concat",
                                      "pairwise", "arith", "index", "mean", "clamp"])
    def test_primitive_gradients(self, name):
        rng = np.random.default_rng(abs(hash(name)) % 1000)
        a = T.tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        pos = T.tensor(rng.uniform(0.5, 2.0, size=(3, 5)).astype(np.float32))
        m = T.tensor(rng.normal(size=(4, 5)).astype(np.float32))
        w = T.tensor(rng.normal(size=(3, 5)).astype(np.float32))
        bias = T.tensor(rng.normal(size=3).astype(np.float32))
        weights = T.tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        cases = {
            "relu": (lambda: T.relu(a) * weights, [a]),
            "sigmoid": (lambda: T.sigmoid(a) * weights, [a]),
            "softmax": (lambda: T.softmax(a, axis=1) * weights, [a]),
            "exp": (lambda: pos.exp() * 0.3, [pos]),
            "log": (lambda: pos.log() * pos, [pos]),
            "sqrt": (lambda: pos.sqrt() * pos, [pos]),
            "norm": (lambda: T.norm(a, axis=1) * weights[:, 0], [a]),
            "l2norm": (lambda: T.l2_normalize(a, axis=1) * weights, [a]),
            "max_pool2": (lambda: T.max_pool2(a) * weights[:, :, :2, :2], [a]),
            "upsample2": (lambda: T.upsample2(a[:, :, :2, :2]) * weights, [a]),
            "linear": (lambda: T.linear(m, w, bias) * T.tensor(np.arange(12.0).reshape(4, 3)), [m, w, bias]),
            "concat": (lambda: T.concat_channels([a, a * a]) * T.concat_channels([weights, weights]), [a]),
            "pairwise": (lambda: T.l2_pairwise_distance(m, w) * T.tensor(np.arange(12.0).reshape(4, 3)), [m, w]),
            "arith": (lambda: (a * weights + a / (weights * weights + 1) - a ** 2) * weights, [a, weights]),
            "index": (lambda: a[:, 1:, ::2] * weights[:, 1:, ::2], [a]),
            "mean": (lambda: (a * weights).mean(axis=(2, 3)) * bias[None, :], [a]),
            "clamp": (lambda: a.clamp(-0.5, 0.5) * weights, [a]),
        }
        fn, inputs = cases[name]
        assert max(check_gradients(fn, inputs)) < 1e-4


class TestGridSample:
    def test_identity(self):
        x = T.tensor(np.random.default_rng(0).normal(size=(2, 3, 7, 9)).astype(np.float32))
        out = T.grid_sample(x, T.tensor(T.identity_grid(2, 7, 9)))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_one_pixel_shift(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 2, 6, 8)).astype(np.float32)
        grid = T.identity_grid(1, 6, 8, dtype=np.float64)
        grid[..., 0] += 2.0 / (8 - 1)
        out = T.grid_sample(T.tensor(x), T.tensor(grid))
        expected = np.zeros_like(x)
        expected[..., :-1] = x[..., 1:]
        np.testing.assert_allclose(out.data, expected, atol=1e-5)

    def test_grid_last_dim(self):
        with pytest.raises(ValueError, match="grid"):
            T.grid_sample(T.tensor(np.zeros((1, 1, 4, 4))), T.tensor(np.zeros((1, 4, 4, 3))))

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = T.tensor(rng.normal(size=(1, 2, 5, 6)).astype(np.float32))
        g = T.tensor(rng.uniform(-1.1, 1.1, size=(1, 4, 3, 2)).astype(np.float32))
        ex, eg = check_gradients(lambda: T.grid_sample(x, g) * T.tensor(np.arange(24.0).reshape(1, 2, 4, 3)), [x, g])
        assert ex < 1e-4
        assert eg < 1e-3


class TestAutodiff:
    def test_graph_visits_each_node_once(self):
        x = T.tensor(np.ones(3), requires_grad=True)
        y = x * 2
        z = (y + y * x).sum()
        graph = z.graph()
        outputs = [n.output for n in graph.nodes]
        assert len(outputs) == len(set(outputs))
        for node in graph.nodes:
            assert all(i < node.output for i in node.inputs)
        assert graph.leaves == [x]
        z.backward()
        np.testing.assert_allclose(x.grad, 2 + 4 * x.data)

    def test_backward_does_not_mutate_activations(self):
        rng = np.random.default_rng(4)
        x = T.tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        k = T.tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        h = T.relu(T.conv2d(x, k, padding=1))
        p = T.max_pool2(h)
        snap = [t.data.copy() for t in (x, k, h, p)]
        (p * p).sum().backward()
        for t, s in zip((x, k, h, p), snap):
            np.testing.assert_array_equal(t.data, s)

    def test_no_grad(self):
        x = T.tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 3
        assert not y.requires_grad


class TestSGD:
    def test_zero_grad_unchanged(self):
        p = T.parameter(np.array([1.0, -2.0]))
        T.sgd_step([p], [np.zeros(2)], lr=0.5, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step(self):
        p = T.parameter(np.array([1.0]))
        T.sgd_step([p], [np.array([1.0])], lr=0.1)
        np.testing.assert_allclose(p.data, [0.9], rtol=1e-7)

    def test_quadratic_bowl(self):
        # f(p) = 0.5 * sum(a * (p - c)^2), minimum at c
        a = np.array([1.0, 3.0], np.float32)
        c = np.array([2.0, -1.0], np.float32)
        p = T.parameter(np.zeros(2))
        opt = T.SGD([p], lr=0.1, momentum=0.5)
        for _ in range(200):
            opt.zero_grad()
            loss = ((p - T.tensor(c)) ** 2 * T.tensor(a * 0.5)).sum()
            loss.backward()
            opt.step()
        assert np.abs(p.data - c).max() < 1e-6

    def test_momentum_buffer_persists(self):
        p = T.parameter(np.array([0.0]))
        opt = T.SGD([p], lr=1.0, momentum=0.5)
        for _ in range(2):
            p.grad = np.array([1.0], np.float32)
            opt.step()
        # v1 = 1, v2 = 1.5 -> p = -2.5
        np.testing.assert_allclose(p.data, [-2.5])


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        # bias correction makes the first update exactly lr * g / (|g| + eps)
        p = T.parameter(np.array([1.0, 1.0]))
        p.grad = np.array([0.3, -4.0], np.float32)
        T.Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.data, [0.99, 1.01], rtol=1e-6)

    def test_reference_two_steps(self):
        p = T.parameter(np.array([0.5]))
        opt = T.Adam([p], lr=0.1, betas=(0.8, 0.9), eps=0.0)
        m = v = 0.0
        want = 0.5
        for t, g in enumerate((1.0, -2.0), start=1):
            p.grad = np.array([g], np.float32)
            opt.step()
            m, v = 0.8 * m + 0.2 * g, 0.9 * v + 0.1 * g * g
            want -= 0.1 * (m / (1 - 0.8 ** t)) / np.sqrt(v / (1 - 0.9 ** t))
        np.testing.assert_allclose(p.data, [want], rtol=1e-6)

    def test_frozen_skipped(self):
        p = T.parameter(np.array([2.0]))
        p.requires_grad = False
        p.grad = np.array([1.0], np.float32)
        T.Adam([p], lr=1.0).step()
        assert p.data[0] == 2.0

    def test_quadratic_bowl(self):
        c = np.array([2.0, -1.0], np.float32)
        p = T.parameter(np.zeros(2))
        opt = T.Adam([p], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            ((p - T.tensor(c)) ** 2).sum().backward()
            opt.step()
        assert np.abs(p.data - c).max() < 1e-2

    def test_negative_lr(self):
        with pytest.raises(ValueError):
            T.Adam([], lr=-1.0)


class TestStackAndMixedOps:
    def test_negative_axis(self):
        a, b = T.tensor(np.zeros((2, 3))), T.tensor(np.ones((2, 3)))
        assert T.stack([a, b], axis=-1).shape == (2, 3, 2)
        np.testing.assert_array_equal(T.stack([a, b], axis=-1).data[..., 1], 1)

    def test_array_on_left_dispatches_to_tensor(self):
        x = T.tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = np.array([5.0, 5.0]) - x
        assert isinstance(out, T.Tensor)
        out.sum().backward()
        np.testing.assert_array_equal(x.grad, [-1, -1])


class TestCheckpoint:
    def test_roundtrip_and_layout(self):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3) - 2.5
        buf = io.BytesIO()
        write_tensor(buf, arr)
        raw = buf.getvalue()
        assert raw[:7] == b"MSFLOW1"
        assert raw[7:11] == (2).to_bytes(4, "little")
        assert raw[11:19] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(raw) == 19 + 24
        np.testing.assert_array_equal(read_tensor(io.BytesIO(raw)), arr)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(b"NOTMAGIC" + bytes(16)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 10_000))
def test_conv_dilation_upsample_property(d, extra_pad, seed):
    rng = np.random.default_rng(seed)
    size = 2 * d + 3
    x = rng.integers(-8, 8, size=(1, 2, size, size)).astype(np.float32)
    k = rng.integers(-4, 4, size=(1, 2, 3, 3)).astype(np.float32)
    big = np.zeros((1, 2, 2 * d + 1, 2 * d + 1), np.float32)
    big[:, :, ::d, ::d] = k
    a = T.conv2d(T.tensor(x), T.tensor(k), dilation=d, padding=extra_pad)
    b = T.conv2d(T.tensor(x), T.tensor(big), dilation=1, padding=extra_pad)
    np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(2, 9), st.integers(2, 9), st.integers(0, 10_000))
def test_grid_sample_identity_property(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(1, c, h, w)).astype(np.float32)
    out = T.grid_sample(T.tensor(x), T.tensor(T.identity_grid(1, h, w)))
    np.testing.assert_allclose(out.data, x, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_outputs_finite(values):
    x = T.tensor(np.array(values, np.float32), requires_grad=True)
    y = (T.sigmoid(x) + T.softmax(x) + T.relu(x)).sum()
    y.backward()
    assert np.isfinite(y.data).all() and np.isfinite(x.grad).all()
