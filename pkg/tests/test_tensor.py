import numpy as np
import pytest

from sparsevq import tensor as T
from sparsevq.errors import NumericError, ShapeMismatchError, UsageError

from gradcheck import finite_diff_grad, rel_error


def grad_of(build, params):
    """Tape gradients of a scalar built by ``build(*tensors)``."""
    tensors = [T.Tensor(p, requires_grad=True) for p in params]
    with T.Tape():
        loss = build(*tensors)
        T.backward(loss)
    return [t.grad for t in tensors]


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, b.data)

    def test_hand_computed(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[11.0]])

    def test_grad_vs_finite_difference(self):
        a0 = np.eye(2)
        b0 = np.array([[2.0, 1.0], [1.0, 2.0]])

        (ga,) = grad_of(lambda a: T.tsum(T.matmul(a, T.Tensor(b0))), [a0])
        np.testing.assert_allclose(ga, [[3.0, 3.0], [3.0, 3.0]])

        fd = finite_diff_grad(
            lambda a: float((a @ b0).sum()), a0.copy(), h=1e-6)
        assert rel_error(ga, fd) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))

    def test_batched_with_shared_weight(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(3, 4, 5))
        w0 = rng.normal(size=(5, 2))
        (gw,) = grad_of(
            lambda w: T.tsum(T.matmul(T.Tensor(x0), w)), [w0])
        fd = finite_diff_grad(lambda w: float((x0 @ w).sum()), w0.copy())
        assert rel_error(gw, fd) < 1e-3


class TestElementwise:
    def test_relu_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_add_definition(self):
        out = T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_gelu_grad_at_zero(self):
        # Exact-erf GELU has slope 1/2 at the origin.
        from scipy.special import erf

        (g,) = grad_of(lambda x: T.tsum(T.gelu(x)), [np.array([0.0])])
        fd = finite_diff_grad(
            lambda x: float((0.5 * x * (1 + erf(x / np.sqrt(2)))).sum()),
            np.array([0.0]))
        np.testing.assert_allclose(g, [0.5], atol=1e-12)
        np.testing.assert_allclose(fd, [0.5], atol=1e-6)

    def test_leading_broadcast(self):
        a0 = np.ones((2, 3))
        b0 = np.array([1.0, 2.0, 3.0])
        out = T.add(T.Tensor(a0), T.Tensor(b0))
        np.testing.assert_array_equal(out.data, a0 + b0)
        (gb,) = grad_of(lambda b: T.tsum(T.mul(T.Tensor(a0), b)), [b0])
        np.testing.assert_array_equal(gb, [2.0, 2.0, 2.0])

    def test_interior_broadcast_rejected(self):
        with pytest.raises(ShapeMismatchError):
            T.add(T.Tensor(np.ones((2, 1, 3))), T.Tensor(np.ones((2, 4, 3))))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_grads_vs_fd(self, op):
        rng = np.random.default_rng(7)
        a0 = rng.uniform(-2, 2, size=(3, 4))
        b0 = rng.uniform(0.5, 2, size=(3, 4))
        fn = getattr(T, op)
        npop = {"add": np.add, "sub": np.subtract,
                "mul": np.multiply, "div": np.divide}[op]
        ga, gb = grad_of(lambda a, b: T.tsum(T.mul(fn(a, b), fn(a, b))),
                         [a0, b0])
        fda = finite_diff_grad(lambda a: float((npop(a, b0) ** 2).sum()), a0.copy())
        fdb = finite_diff_grad(lambda b: float((npop(a0, b) ** 2).sum()), b0.copy())
        assert rel_error(ga, fda) < 1e-3
        assert rel_error(gb, fdb) < 1e-3


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(T.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_overflow_stability(self):
        out = T.softmax(T.Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 7)) * 10
        out = T.softmax(T.Tensor(x), axis=-1)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_jvp_vs_finite_difference(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            x0 = rng.uniform(-2, 2, size=4)
            v = rng.normal(size=4)

            def build(x):
                return T.tsum(T.mul(T.softmax(x), T.Tensor(v)))

            (g,) = grad_of(build, [x0])

            def f(x):
                e = np.exp(x - x.max())
                return float((e / e.sum() * v).sum())

            fd = finite_diff_grad(f, x0.copy())
            assert rel_error(g, fd, floor=1e-6) < 1e-5


class TestLayernorm:
    def affine(self, d):
        return (T.Tensor(np.ones(d), requires_grad=True),
                T.Tensor(np.zeros(d), requires_grad=True))

    def test_constant_row(self):
        g, b = self.affine(4)
        out = T.layernorm(T.Tensor([[5.0, 5.0, 5.0, 5.0]]), g, b)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_two_point_row(self):
        g, b = self.affine(2)
        out = T.layernorm(T.Tensor([[1.0, 3.0]]), g, b)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_standardizes(self):
        rng = np.random.default_rng(5)
        x = rng.normal(3.0, 2.5, size=(6, 16))
        g, b = self.affine(16)
        out = T.layernorm(T.Tensor(x), g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_grads_vs_fd(self):
        rng = np.random.default_rng(13)
        x0 = rng.uniform(-2, 2, size=(3, 5))
        g0 = rng.uniform(0.5, 1.5, size=5)
        b0 = rng.uniform(-0.5, 0.5, size=5)
        w = rng.normal(size=(3, 5))

        def build(x, g, b):
            return T.tsum(T.mul(T.layernorm(x, g, b), T.Tensor(w)))

        gx, gg, gb = grad_of(build, [x0, g0, b0])

        def fwd(x, g, b):
            mu = x.mean(-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(-1, keepdims=True)
            return float(((g * xc / np.sqrt(var + 1e-5) + b) * w).sum())

        assert rel_error(gx, finite_diff_grad(lambda x: fwd(x, g0, b0), x0.copy())) < 1e-4
        assert rel_error(gg, finite_diff_grad(lambda g: fwd(x0, g, b0), g0.copy())) < 1e-4
        assert rel_error(gb, finite_diff_grad(lambda b: fwd(x0, g0, b), b0.copy())) < 1e-4

    def test_affine_shape_mismatch(self):
        g, b = self.affine(3)
        with pytest.raises(ShapeMismatchError):
            T.layernorm(T.Tensor(np.ones((2, 4))), g, b)


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = grad_of(lambda x: T.tsum(x), [np.ones((2, 3))])
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_sum_of_squares(self):
        (g,) = grad_of(lambda x: T.tsum(T.mul(x, x)), [np.array([1.0, 2.0])])
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_two_layer_toy_model_vs_fd(self):
        rng = np.random.default_rng(21)
        x = rng.uniform(-1, 1, size=(4, 3))
        w1_0 = rng.uniform(-1, 1, size=(3, 5))
        w2_0 = rng.uniform(-1, 1, size=(5, 2))

        def build(w1, w2):
            h = T.gelu(T.matmul(T.Tensor(x), w1))
            out = T.matmul(h, w2)
            return T.tsum(T.mul(out, out))

        g1, g2 = grad_of(build, [w1_0, w2_0])

        from scipy.special import erf

        def fwd(w1, w2):
            h = x @ w1
            h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
            out = h @ w2
            return float((out * out).sum())

        assert rel_error(g1, finite_diff_grad(lambda w: fwd(w, w2_0), w1_0.copy())) < 1e-3
        assert rel_error(g2, finite_diff_grad(lambda w: fwd(w1_0, w), w2_0.copy())) < 1e-3

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape():
            y = T.mul(x, x)
            with pytest.raises(UsageError):
                T.backward(y)

    def test_backward_without_tape_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        y = T.tsum(x)
        with pytest.raises(UsageError):
            T.backward(y)

    def test_accumulation_is_exactly_double(self):
        x0 = np.array([0.3, -1.2, 2.0])

        def f_once(x):
            return T.tsum(T.gelu(T.mul(x, x)))

        (g1,) = grad_of(lambda x: f_once(x), [x0])
        (g2,) = grad_of(lambda x: T.add(f_once(x), f_once(x)), [x0])
        np.testing.assert_array_equal(g2, 2.0 * g1)


class TestStopGradient:
    def test_forward_identity(self):
        x = T.Tensor([1.0, 2.0])
        np.testing.assert_array_equal(T.stop_gradient(x).data, [1.0, 2.0])

    def test_blocks_gradient(self):
        (g,) = grad_of(lambda x: T.tsum(T.add(T.mul(x, x), T.stop_gradient(x))),
                       [np.array([1.0, 2.0])])
        np.testing.assert_array_equal(g, [2.0, 4.0])

        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape():
            loss = T.tsum(T.stop_gradient(x))
            with pytest.raises(UsageError):
                T.backward(loss)

    def test_straight_through_identity(self):
        q = np.array([5.0, -3.0])
        (g,) = grad_of(
            lambda x: T.tsum(T.add(x, T.stop_gradient(T.sub(T.Tensor(q), x)))),
            [np.array([1.0, 2.0])])
        np.testing.assert_array_equal(g, [1.0, 1.0])


class TestOtherOps:
    def test_patchify_values_and_grad(self):
        x0 = np.arange(8.0)
        out = T.patchify(T.Tensor(x0), 4, 4)
        np.testing.assert_array_equal(out.data, [[0, 1, 2, 3], [4, 5, 6, 7]])

        # Overlapping patches accumulate gradient into shared positions.
        w = np.arange(12.0).reshape(3, 4) + 1

        def build(x):
            return T.tsum(T.mul(T.patchify(x, 4, 2), T.Tensor(w)))

        (g,) = grad_of(build, [x0])

        def f(x):
            p = np.stack([x[i * 2:i * 2 + 4] for i in range(3)])
            return float((p * w).sum())

        assert rel_error(g, finite_diff_grad(f, x0.copy())) < 1e-6

    def test_take_rows_scatter_grad(self):
        z0 = np.arange(6.0).reshape(3, 2)
        idx = np.array([0, 2, 0])

        (g,) = grad_of(lambda z: T.tsum(T.take_rows(z, idx)), [z0])
        np.testing.assert_array_equal(g, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_linsolve_vs_fd(self):
        rng = np.random.default_rng(17)
        m0 = rng.normal(size=(2, 3, 3)) + 3 * np.eye(3)
        b0 = rng.normal(size=(2, 3, 1))

        def build(m, b):
            w = T.linsolve(m, b)
            return T.tsum(T.mul(w, w))

        gm, gb = grad_of(build, [m0, b0])

        def f_m(m):
            w = np.linalg.solve(m, b0)
            return float((w * w).sum())

        def f_b(b):
            w = np.linalg.solve(m0, b)
            return float((w * w).sum())

        assert rel_error(gm, finite_diff_grad(f_m, m0.copy())) < 1e-3
        assert rel_error(gb, finite_diff_grad(f_b, b0.copy())) < 1e-3

    def test_reshape_swapaxes_roundtrip_grad(self):
        x0 = np.arange(24.0).reshape(2, 3, 4)

        def build(x):
            y = T.swapaxes(T.reshape(x, (6, 4)), 0, 1)
            return T.tsum(T.mul(y, y))

        (g,) = grad_of(build, [x0])
        np.testing.assert_allclose(g, 2 * x0)


class TestInvariants:
    def test_random_op_chain_gradients(self):
        # Differentiable ops on random inputs in [-2, 2]: tape vs central
        # finite differences at h=1e-5 within 1e-3 relative error.
        rng = np.random.default_rng(42)
        for trial in range(10):
            x0 = rng.uniform(-2, 2, size=(3, 4))
            w = rng.normal(size=(4, 4))

            def build(x):
                h = T.gelu(T.matmul(x, T.Tensor(w)))
                s = T.softmax(h, axis=-1)
                return T.tsum(T.mul(s, h))

            (g,) = grad_of(build, [x0])

            from scipy.special import erf

            def f(x):
                h = x @ w
                h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
                e = np.exp(h - h.max(-1, keepdims=True))
                s = e / e.sum(-1, keepdims=True)
                return float((s * h).sum())

            fd = finite_diff_grad(f, x0.copy())
            assert rel_error(g, fd) < 1e-3, f"trial {trial}"

    def test_forward_repeatable_bit_identical(self):
        rng = np.random.default_rng(9)
        x = T.Tensor(rng.normal(size=(4, 4)))
        w = T.Tensor(rng.normal(size=(4, 4)))
        a = T.softmax(T.matmul(x, w)).data
        b = T.softmax(T.matmul(x, w)).data
        assert np.array_equal(a, b)

    def test_debug_finite_check(self):
        T.DEBUG_CHECK_FINITE = True
        try:
            with pytest.raises(NumericError):
                T.Tensor([np.nan, 1.0])
        finally:
            T.DEBUG_CHECK_FINITE = False
