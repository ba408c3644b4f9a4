"""Tensor arithmetic and the reverse-mode tape."""

import math

import numpy as np
import pytest

from guideppl import tensor as T
from guideppl.tensor import DomainError, ShapeError, Tape, TapeError, Tensor

from oracles import fd_grad, rel_err


def tape_grad(f, x):
    """Gradient of scalar ``f(Tensor)`` at ``x`` through the tape."""
    with Tape() as tape:
        leaf = tape.leaf(np.array(x, dtype=float))
        out = f(leaf)
    return T.backward(out)[leaf]


def check_primitive(f, x, tol=1e-4):
    g = tape_grad(lambda t: T.tsum(f(t)), x)
    num = fd_grad(lambda v: float(T.tsum(f(Tensor(v))).data), x)
    assert rel_err(g, num) < tol


class TestElementwise:
    def test_sigmoid_zero(self):
        assert float(T.sigmoid(0.0).data) == 0.5

    def test_log_exp_inverse(self):
        assert float(T.log(T.exp(1.5)).data) == pytest.approx(1.5, abs=1e-15)

    def test_add_vectors(self):
        np.testing.assert_array_equal(T.add([1, 2], [3, 4]).data, [4, 6])

    def test_scalar_broadcast_allowed(self):
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) * 3.0).data, [3.0, 6.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(-2.0)

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            T.div(1.0, Tensor([0.0, 1.0]))


class TestSoftplus:
    def test_at_zero(self):
        assert float(T.softplus(0.0).data) == pytest.approx(math.log(2), abs=1e-15)

    def test_large_argument(self):
        assert abs(float(T.softplus(50.0).data) - 50.0) < 1e-12

    def test_small_argument_positive(self):
        # log1p(exp(-50)) = exp(-50) - exp(-100)/2 + ...
        v = float(T.softplus(-50.0).data)
        assert v > 0
        assert v == pytest.approx(math.exp(-50), rel=1e-12)

    def test_no_overflow(self):
        out = T.softplus(Tensor([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert out[1] == 1000.0


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(T.matmul(np.eye(2), [[1.0], [2.0]]).data, [[1.0], [2.0]])

    def test_row_times_column(self):
        np.testing.assert_array_equal(T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data, [[11.0]])

    def test_inner_dims_checked(self):
        with pytest.raises(ShapeError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_grad_wrt_left(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 4))
        B = rng.standard_normal((4, 2))
        g = tape_grad(lambda a: T.tsum(T.matmul(a, B)), A)
        num = fd_grad(lambda a: float(np.sum(a @ B)), A)
        assert rel_err(g, num) < 1e-5
        # dA = G B^T with G = ones
        np.testing.assert_allclose(g, np.ones((3, 2)) @ B.T, atol=1e-12)


class TestLogsumexp:
    def test_two_zeros(self):
        assert float(T.logsumexp([0.0, 0.0]).data) == pytest.approx(math.log(2), abs=1e-15)

    def test_large_values(self):
        assert float(T.logsumexp([1000.0, 1000.0]).data) == pytest.approx(1000 + math.log(2), abs=1e-12)

    def test_singleton(self):
        assert float(T.logsumexp([-1.2]).data) == pytest.approx(-1.2, abs=1e-15)

    def test_empty_raises(self):
        with pytest.raises((ShapeError, ValueError)):
            T.logsumexp(np.zeros(0))

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal(7) * 5
            c = rng.standard_normal() * 10
            lhs = float(T.logsumexp(a + c).data)
            assert lhs == pytest.approx(float(T.logsumexp(a).data) + c, abs=1e-10)


class TestSimplex:
    def test_single_zero(self):
        np.testing.assert_allclose(T.simplex([0.0]).data, [0.5, 0.5], atol=1e-15)

    def test_two_zeros(self):
        np.testing.assert_allclose(T.simplex([0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)

    def test_valid_probability_vector(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            z = rng.standard_normal(rng.integers(1, 8)) * 20
            p = T.simplex(z).data
            assert np.all(p > 0)
            assert abs(p.sum() - 1) < 1e-12


class TestBackward:
    def test_square(self):
        assert float(tape_grad(lambda x: x * x, 3.0)) == 6.0

    def test_softplus_slope(self):
        assert float(tape_grad(T.softplus, 0.0)) == pytest.approx(0.5, abs=1e-15)

    def test_non_scalar_loss(self):
        with Tape() as tape:
            x = tape.leaf(np.ones(3))
            y = x * 2.0
        with pytest.raises(ShapeError):
            T.backward(y)

    def test_detached_loss(self):
        with pytest.raises(TapeError):
            T.backward(Tensor(1.0))

    def test_tape_cleared(self):
        with Tape() as tape:
            x = tape.leaf(2.0)
            y = x * x
        T.backward(y)
        assert len(tape) == 0
        assert not y.attached

    def test_unused_leaf_zero(self):
        with Tape() as tape:
            x = tape.leaf(1.0)
            z = tape.leaf(np.ones(2))
            y = x * 3.0
        g = T.backward(y)
        np.testing.assert_array_equal(g[z], np.zeros(2))

    def test_mlp_against_finite_differences(self):
        rng = np.random.default_rng(3)
        sizes = [4, 5, 3, 1]
        ws = [rng.standard_normal((sizes[i + 1], sizes[i])) for i in range(3)]
        bs = [rng.standard_normal(sizes[i + 1]) for i in range(3)]
        x = rng.standard_normal(4)
        flat = np.concatenate([w.ravel() for w in ws] + [b.ravel() for b in bs])

        def unpack(v, mk):
            out, k = [], 0
            for arr in ws + bs:
                out.append(mk(v[k:k + arr.size].reshape(arr.shape)))
                k += arr.size
            return out[:3], out[3:]

        def net_np(v):
            W, B = unpack(v, np.asarray)
            h = np.tanh(W[0] @ x + B[0])
            h = 1 / (1 + np.exp(-(W[1] @ h + B[1])))
            return float((W[2] @ h + B[2])[0])

        with Tape() as tape:
            leaf = tape.leaf(flat)
            k = 0
            Ws, Bs = [], []
            for arr in ws:
                Ws.append(T.reshape(T.get(leaf, slice(k, k + arr.size)), arr.shape))
                k += arr.size
            for arr in bs:
                Bs.append(T.get(leaf, slice(k, k + arr.size)))
                k += arr.size
            h = T.tanh(T.linear(x, Ws[0], Bs[0]))
            h = T.sigmoid(T.linear(h, Ws[1], Bs[1]))
            out = T.tsum(T.linear(h, Ws[2], Bs[2]))
        g = T.backward(out)[leaf]
        assert rel_err(g, fd_grad(net_np, flat)) < 1e-4


class TestPrimitiveGradients:
    """Tape gradient vs. central differences, h = 1e-5, relative error < 1e-4."""

    rng = np.random.default_rng(4)
    x = rng.standard_normal(5)
    pos = rng.uniform(0.5, 2.0, 5)
    other = rng.standard_normal(5)

    @pytest.mark.parametrize("name,f,domain", [
        ("add", lambda t: t + TestPrimitiveGradients.other, "x"),
        ("sub", lambda t: TestPrimitiveGradients.other - t, "x"),
        ("mul", lambda t: t * t, "x"),
        ("div", lambda t: TestPrimitiveGradients.other / t, "pos"),
        ("exp", T.exp, "x"),
        ("log", T.log, "pos"),
        ("neg", T.neg, "x"),
        ("sigmoid", T.sigmoid, "x"),
        ("tanh", T.tanh, "x"),
        ("softplus", T.softplus, "x"),
        ("sqrt", T.sqrt, "pos"),
        ("power", lambda t: T.power(t, 1.7), "pos"),
        ("tan", lambda t: T.tan(t * 0.3), "x"),
        ("lgamma", T.lgamma, "pos"),
        ("log_sigmoid", T.log_sigmoid, "x"),
        ("softplus_inv", T.softplus_inv, "pos"),
        ("logsumexp", T.logsumexp, "x"),
        ("softmax", lambda t: T.softmax(t) * TestPrimitiveGradients.other, "x"),
        ("simplex", lambda t: T.simplex(t) * np.arange(6.0), "x"),
        ("get", lambda t: T.get(t, slice(1, 4)) * 2.0, "x"),
        ("concat", lambda t: T.concat([t, t * t]), "x"),
        ("stack", lambda t: T.stack([t, T.exp(t)]), "x"),
        ("mean", T.mean, "x"),
        ("where", lambda t: T.where(np.array([1, 0, 1, 0, 1], bool), t * 2.0, t * t), "x"),
        ("reshape", lambda t: T.reshape(T.get(t, slice(0, 4)), (2, 2)) * np.array([[1.0, 2.0], [3.0, 4.0]]), "x"),
    ])
    def test_gradient(self, name, f, domain):
        check_primitive(f, getattr(self, domain))

    def test_detach_blocks(self):
        g = tape_grad(lambda t: T.tsum(T.detach(t) * t), self.x)
        np.testing.assert_allclose(g, self.x, atol=1e-15)

    def test_detach_forwards_value(self):
        np.testing.assert_array_equal(T.detach(Tensor(self.x)).data, self.x)

    def test_one_hot(self):
        np.testing.assert_array_equal(T.one_hot(2, 4).data, [0, 0, 1, 0])


class TestInvariants:
    def test_forward_finite(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal(100) * 30)
        for f in (T.sigmoid, T.tanh, T.softplus, T.log_sigmoid, T.exp, lambda t: T.simplex(t)):
            out = f(x * 0.5 if f is T.exp else x).data
            assert np.all(np.isfinite(out))

    def test_different_tapes_rejected(self):
        with Tape() as t1:
            a = t1.leaf(1.0)
        with Tape() as t2:
            b = t2.leaf(2.0)
            with pytest.raises(TapeError):
                T.add(a, b)
