import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdetr.autodiff import MultiheadAttention, Tape, Tensor, backward, check_gradients, hold_detached, precision
from deskdetr.autodiff import functional as F
from deskdetr.errors import ConfigError, ContractError, DimensionError

TOL = 1e-4


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64), requires_grad=True)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.5, -2.0], [0.25, 3.0]]))
        out = F.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_case(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_sum_grad_is_ones_times_bt(self, f64):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 5)
        backward(F.sum(a @ b))
        np.testing.assert_allclose(a.grad, np.ones((3, 5)) @ b.data.T, rtol=1e-12)
        assert check_gradients(lambda: F.sum(a @ b), [a, b]) < TOL

    def test_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def naive_conv(x, k, stride, pad):
    lo, hi = pad if isinstance(pad, tuple) else (pad, pad)
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (lo, hi), (lo, hi)))
    ho = (h + lo + hi - kh) // stride + 1
    wo = (w + lo + hi - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            out[oc, i, j] += xp[ic, i * stride + a, j * stride + b] * k[oc, ic, a, b]
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(1).normal(size=(1, 5, 4)).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_summation_case(self):
        out = F.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1)
        assert out.data.item() == 9.0

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, (0, 1), 3), (2, (1, 0), 3), (1, 0, 1), (1, 0, 2), (2, 0, 2)])
    def test_against_nested_loops(self, stride, pad, k):
        rng = np.random.default_rng(stride * 10 + k)
        x = rng.normal(size=(2, 6, 6))
        kern = rng.normal(size=(3, 2, k, k))
        out = F.conv2d(Tensor(x), Tensor(kern), stride=stride, padding=pad)
        assert np.max(np.abs(out.data - naive_conv(x, kern, stride, pad))) <= 1e-6

    def test_non_integral_extent(self):
        with pytest.raises(ConfigError):
            F.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=0)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, (0, 1), 3), (2, 1, 1), (1, 0, 1)])
    def test_gradients(self, f64, stride, pad, k):
        rng = np.random.default_rng(7)
        x, w, b = leaf(rng, 2, 2, 6, 6), leaf(rng, 3, 2, k, k), leaf(rng, 3)
        if k == 1 and pad == 1:
            x = leaf(rng, 2, 2, 5, 5)
        fn = lambda: F.sum(F.conv2d(x, w, b, stride, pad) ** 2)  # noqa: E731
        assert check_gradients(fn, [x, w, b]) < TOL


class TestNormsAndActivations:
    def test_softmax_uniform(self):
        out = F.softmax(Tensor(np.full(5, 0.3)))
        np.testing.assert_allclose(out.data, 0.2, atol=1e-7)

    def test_sigmoid_zero(self):
        assert F.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_layer_norm_constant_is_zero(self):
        out = F.layer_norm(Tensor(np.full((2, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_layer_norm_moments(self):
        x = np.random.default_rng(3).normal(2.0, 3.0, size=(4, 64))
        out = F.layer_norm(Tensor(x)).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-4)

    def test_batch_norm_inference_negative_var(self):
        with pytest.raises(ConfigError):
            F.batch_norm_inference(Tensor(np.zeros((1, 2, 2))), np.zeros(1), -np.ones(1), Tensor(np.ones(1)), Tensor(np.zeros(1)))

    @pytest.mark.parametrize("kind", ["relu", "silu", "gelu", "sigmoid", "tanh"])
    def test_activation_grads(self, f64, kind):
        rng = np.random.default_rng(11)
        x = leaf(rng, 20)
        x.data[np.abs(x.data) < 1e-3] = 0.5  # keep relu away from its kink
        assert check_gradients(lambda: F.sum(F.activation(x, kind) * np.linspace(-1, 1, 20)), [x]) < TOL

    def test_unknown_activation(self):
        with pytest.raises(ConfigError):
            F.activation(Tensor([1.0]), "swish")

    def test_norm_grads(self, f64):
        rng = np.random.default_rng(5)
        x, g, b = leaf(rng, 3, 4, 6), leaf(rng, 6), leaf(rng, 6)
        wts = rng.normal(size=(3, 4, 6))
        assert check_gradients(lambda: F.sum(F.layer_norm(x, g, b) * wts), [x, g, b]) < TOL
        xb, gb, bb = leaf(rng, 3, 2, 3, 3), leaf(rng, 2), leaf(rng, 2)
        wb = rng.normal(size=(3, 2, 3, 3))
        assert check_gradients(lambda: F.sum(F.batch_norm_train(xb, gb, bb)[0] * wb), [xb, gb, bb]) < TOL
        mean, var = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
        fn = lambda: F.sum(F.batch_norm_inference(xb, mean, var, gb, bb) * wb)  # noqa: E731
        assert check_gradients(fn, [xb, gb, bb]) < TOL

    def test_softmax_and_bce_grads(self, f64):
        rng = np.random.default_rng(6)
        x = leaf(rng, 4, 7)
        wts = rng.normal(size=(4, 7))
        assert check_gradients(lambda: F.sum(F.softmax(x, axis=-1) * wts), [x]) < TOL
        t = rng.uniform(size=(4, 7))
        assert check_gradients(lambda: F.sum(F.bce_with_logits(x, t)), [x]) < TOL

    def test_elementwise_and_shape_grads(self, f64):
        rng = np.random.default_rng(8)
        a, b = leaf(rng, 3, 4), leaf(rng, 1, 4, lo=0.5, hi=2.0)

        def fn():
            y = F.concat([a / b, F.maximum(a, b * 0.3), F.minimum(a, 0.1) - b], axis=0)
            y = F.stack([y, F.exp(y * 0.3)], axis=1).reshape(9, 8).transpose(1, 0)
            z = F.upsample_nearest2x(y[2:6, 1:5].reshape(1, 4, 4)) * np.linspace(0, 1, 8)
            return F.sum(z) + F.mean(F.log(b) + F.sqrt(b) + F.abs(a) + F.clamp(a, -1.0, 1.0) ** 2.0)

        assert check_gradients(fn, [a, b]) < TOL

    def test_gather_rows_grad(self, f64):
        rng = np.random.default_rng(9)
        x = leaf(rng, 2, 5, 3)
        idx = np.array([[4, 1, 1], [0, 2, 3]])
        assert check_gradients(lambda: F.sum(F.gather_rows(x, idx) ** 2.0), [x]) < TOL


class TestBilinear:
    def test_pixel_center(self):
        feat = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
        out = F.bilinear_sample(Tensor(feat), Tensor(np.array([[(2 + 0.5) / 4, (1 + 0.5) / 3]])))
        assert out.data[0, 0] == feat[0, 1, 2]

    def test_midpoint(self):
        feat = np.array([[[0.0, 1.0]]])
        out = F.bilinear_sample(Tensor(feat), Tensor(np.array([[0.5, 0.5]])))
        assert out.data[0, 0] == pytest.approx(0.5)

    def test_outside_is_zero(self):
        feat = np.ones((2, 4, 4))
        out = F.bilinear_sample(Tensor(feat), Tensor(np.array([[1.5, 0.5], [-0.3, 0.2], [0.5, 2.0]])))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_gradients(self, f64):
        rng = np.random.default_rng(12)
        feat = leaf(rng, 3, 5, 6)
        pts = Tensor(rng.uniform(-0.1, 1.1, size=(9, 2)), requires_grad=True)
        wts = rng.normal(size=(3, 9))
        assert check_gradients(lambda: F.sum(F.bilinear_sample(feat, pts) * wts), [feat, pts]) < TOL


class TestBackward:
    def test_sum_grad_ones(self):
        x = Tensor(np.array([1.0, -3.0, 2.0]), requires_grad=True)
        backward(F.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(F.sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_second_call_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = F.sum(x * 2.0)
        backward(loss)
        with pytest.raises(ContractError):
            backward(loss)

    def test_tape_topological(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
        c = a @ b
        loss = F.sum(F.softmax(c + a, axis=0) * c)
        tape = Tape.build(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for n in tape.nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(n)]
        assert {id(a), id(b)} <= {id(n) for n in tape.leaves()}

    def test_composed_conv_norm_attention(self, f64):
        rng = np.random.default_rng(21)
        x = leaf(rng, 1, 2, 4, 4)
        k = leaf(rng, 8, 2, 3, 3)
        g, b = leaf(rng, 8), leaf(rng, 8)
        attn = MultiheadAttention(8, 2, rng)
        for p in attn.parameters():
            p.data = p.data.astype(np.float64)

        def fn():
            y = F.conv2d(x, k, padding=1)
            tokens = y.reshape(1, 8, 16).transpose(0, 2, 1)
            tokens = F.layer_norm(tokens, g, b)
            return F.sum(attn(tokens, tokens, tokens) ** 2.0)

        assert check_gradients(fn, [x, k, g, b] + attn.parameters()[:2]) < TOL


class TestHoldDetached:
    def test_replays_first_pass(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        held = []
        with hold_detached(held):
            first = x.detach()
        x.data = x.data + 5.0
        with hold_detached(held):
            again = F.detach(x)
        np.testing.assert_array_equal(again.data, first.data)
        np.testing.assert_array_equal(x.detach().data, [6.0, 7.0])

    def test_finite_differences_see_the_stop_gradient(self, f64):
        # f = x * stop(x): backward gives stop(x); plain differences would give 2x
        x = Tensor(np.array([0.7, -1.3]), requires_grad=True)
        held = []

        def fn():
            with hold_detached(held):
                return F.sum(x * x.detach())

        assert check_gradients(fn, [x]) < TOL
        np.testing.assert_allclose(x.grad, x.data)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_property(values):
    out = F.softmax(Tensor(np.array(values, dtype=np.float64))).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) <= 1e-6


def test_forward_bit_identical():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = F.softmax(F.conv2d(Tensor(x), Tensor(w), padding=1), axis=1).data
    b = F.softmax(F.conv2d(Tensor(x), Tensor(w), padding=1), axis=1).data
    assert a.tobytes() == b.tobytes()
