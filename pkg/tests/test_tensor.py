"""Per-op oracle checks for the autodiff tape.

Every differentiable op is compared against a central finite-difference
gradient computed directly on the underlying numpy buffers. The FD code
here is deliberately dumb and local so it cannot share a bug with the
tape implementation.
"""

import numpy as np
import pytest

from hotmoe import tensor as T


def fd_grad(scalar_fn, arr, eps=1e-6):
    """Central-difference gradient of scalar_fn() w.r.t. arr, in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        f_plus = scalar_fn()
        flat[i] = keep - eps
        f_minus = scalar_fn()
        flat[i] = keep
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def assert_close(analytic, numeric, tol=1e-5):
    # central differences in float64 carry ~1e-9 absolute noise, so the
    # floor keeps near-zero components from dominating the relative error
    denom = np.maximum(np.abs(numeric), 1e-4)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < tol, f"max rel err {rel.max():.3e}"


def check_op(build, arrays, tol=1e-5):
    """build(tensors) -> scalar Tensor; checks grads for every input."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t, a in zip(tensors, arrays):
        def scalar():
            fresh = [T.Tensor(x) for x in arrays]
            return build(*fresh).item()
        numeric = fd_grad(scalar, a)
        assert_close(t.grad, numeric, tol)


RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.normal(size=shape)


class TestElementwise:
    def test_add_broadcast(self):
        check_op(lambda a, b: T.tsum(T.mul(a + b, a + b)), [rand(3, 4), rand(4)])

    def test_sub(self):
        check_op(lambda a, b: T.tsum(T.exp(a - b)), [rand(2, 3), rand(2, 3)])

    def test_mul_broadcast(self):
        check_op(lambda a, b: T.tsum(a * b), [rand(2, 3, 4), rand(1, 4)])

    def test_div(self):
        a = rand(3, 3)
        b = rand(3, 3) + 3.0  # keep denominators away from zero
        check_op(lambda x, y: T.tsum(x / y), [a, b])

    def test_power(self):
        a = np.abs(rand(4, 4)) + 0.5
        check_op(lambda x: T.tsum(T.power(x, 3.0)), [a])

    def test_neg_chain(self):
        check_op(lambda a: T.tsum(-a * a), [rand(5)])

    def test_exp_log(self):
        a = np.abs(rand(3, 4)) + 0.5
        check_op(lambda x: T.tsum(T.log(T.exp(x) + T.exp(x))), [a])

    def test_gelu(self):
        check_op(lambda x: T.tsum(T.gelu(x)), [rand(4, 5)], tol=1e-6)

    def test_gelu_matches_erf_definition(self):
        from scipy.special import erf
        x = rand(64)
        out = T.gelu(T.Tensor(x)).data
        ref = x * 0.5 * (1.0 + erf(x / np.sqrt(2)))
        np.testing.assert_array_equal(out, ref)


class TestShapes:
    def test_reshape(self):
        check_op(lambda a: T.tsum(T.reshape(a, (6, 2)) * 3.0), [rand(3, 4)])

    def test_swapaxes(self):
        w = rand(4, 3)
        check_op(lambda a: T.tsum(T.swapaxes(a, 0, 1) * w), [rand(3, 4)])

    def test_sum_axis_keepdims(self):
        check_op(lambda a: T.tsum(T.tsum(a, axis=1, keepdims=True) * 2.0), [rand(3, 4)])

    def test_mean(self):
        check_op(lambda a: T.tsum(T.tmean(a, axis=0) ** 2.0), [rand(5, 3)])

    def test_mean_all(self):
        a = rand(4, 4)
        out = T.tmean(T.Tensor(a))
        assert out.item() == pytest.approx(a.mean())


class TestMatmul:
    def test_plain(self):
        check_op(lambda a, b: T.tsum(a @ b), [rand(3, 4), rand(4, 5)])

    def test_batched(self):
        check_op(lambda a, b: T.tsum((a @ b) ** 2.0), [rand(2, 3, 4), rand(2, 4, 5)])

    def test_broadcast_weight(self):
        # batched activations against a shared 2-D weight
        check_op(lambda a, b: T.tsum(a @ b), [rand(2, 3, 4), rand(4, 5)])

    def test_value_matches_numpy(self):
        a, b = rand(6, 7), rand(7, 8)
        np.testing.assert_array_equal((T.Tensor(a) @ T.Tensor(b)).data, a @ b)

    def test_rejects_1d(self):
        with pytest.raises(ValueError):
            T.matmul(T.Tensor(rand(3)), T.Tensor(rand(3, 2)))


class TestSoftmax:
    def test_softmax_grad(self):
        w = rand(3, 5)
        check_op(lambda a: T.tsum(T.softmax(a) * w), [rand(3, 5)])

    def test_log_softmax_grad(self):
        w = rand(2, 6)
        check_op(lambda a: T.tsum(T.log_softmax(a) * w), [rand(2, 6)])

    def test_softmax_rows_sum_to_one(self):
        s = T.softmax(T.Tensor(rand(4, 9))).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_log_softmax_consistency(self):
        x = rand(3, 7)
        np.testing.assert_allclose(
            np.exp(T.log_softmax(T.Tensor(x)).data),
            T.softmax(T.Tensor(x)).data,
            atol=1e-12,
        )

    def test_softmax_shift_invariance(self):
        x = rand(2, 5)
        a = T.softmax(T.Tensor(x)).data
        b = T.softmax(T.Tensor(x + 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestIndexing:
    def test_gather_rows_with_duplicates(self):
        idx = np.array([0, 2, 2, 1])
        w = rand(4, 3)
        check_op(lambda a: T.tsum(T.gather_rows(a, idx) * w), [rand(5, 3)])

    def test_take_along_last(self):
        idx = RNG.integers(0, 6, size=(3, 4, 1))
        check_op(lambda a: T.tsum(T.take_along_last(a, idx)), [rand(3, 4, 6)])

    def test_gather_pairs(self):
        rows = np.array([0, 1, 1, 2])
        cols = np.array([3, 0, 0, 2])
        check_op(lambda a: T.tsum(T.gather_pairs(a, rows, cols) ** 2.0), [rand(3, 4)])

    def test_index_add_rows(self):
        idx = np.array([1, 3, 1])
        w = rand(5, 2)
        check_op(
            lambda a, b: T.tsum(T.index_add_rows(a, idx, b) * w),
            [rand(5, 2), rand(3, 2)],
        )

    def test_index_add_accumulates_duplicates(self):
        base = np.zeros((3, 2))
        add = np.ones((2, 2))
        out = T.index_add_rows(T.Tensor(base), np.array([1, 1]), T.Tensor(add))
        np.testing.assert_array_equal(out.data[1], [2.0, 2.0])


class TestTapeMechanics:
    def test_grad_accumulates_across_uses(self):
        a = T.Tensor(np.array([2.0]), requires_grad=True)
        out = T.tsum(a * a + a * 3.0)
        out.backward()
        assert a.grad[0] == pytest.approx(2 * 2.0 + 3.0)

    def test_backward_requires_scalar(self):
        a = T.Tensor(rand(3), requires_grad=True)
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        a = T.Tensor(rand(3), requires_grad=True)
        with T.no_grad():
            out = a * 2.0
        assert not out.requires_grad
        assert out._parents == []

    def test_no_grad_restores_flag(self):
        assert T.grad_enabled()
        with T.no_grad():
            assert not T.grad_enabled()
        assert T.grad_enabled()

    def test_constant_leaves_get_no_grad(self):
        a = T.Tensor(rand(3), requires_grad=True)
        c = T.Tensor(rand(3))
        T.tsum(a * c).backward()
        assert c.grad is None

    def test_float64_everywhere(self):
        t = T.Tensor(np.arange(4, dtype=np.int64))
        assert t.data.dtype == np.float64
        assert (t * 2).data.dtype == np.float64

    def test_diamond_graph(self):
        # f = (a+a)*(a+a) = 4a^2, df/da = 8a
        a = T.Tensor(np.array([3.0]), requires_grad=True)
        b = a + a
        T.tsum(b * b).backward()
        assert a.grad[0] == pytest.approx(24.0)

    def test_check_finite_raises(self):
        from hotmoe.errors import NumericalError
        with pytest.raises(NumericalError):
            T.check_finite(T.Tensor(np.array([np.nan])), "unit")
