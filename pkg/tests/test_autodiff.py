import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ztrans import autodiff as ad
from ztrans.autodiff import Tensor, grad_check
from ztrans.errors import ContractError, ShapeError


def _t(shape, seed, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(size=shape) * scale, requires_grad=True)


class TestBasics:
    def test_product_rule(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(4.0, requires_grad=True)
        (x * y + x).backward()
        assert x.grad == 5.0 and y.grad == 3.0

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(8.0)

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor(1.5, requires_grad=True)
        (x * 2.0).backward()
        (x * 3.0).backward()
        assert x.grad == pytest.approx(5.0)
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            ad.backward(_t((2,), 0) * 2.0)

    def test_broadcast_gradient_is_reduced(self):
        a = _t((3, 4), 0)
        b = _t((4,), 1)
        ad.sum(a + b).backward()
        np.testing.assert_allclose(b.grad, np.full(4, 3.0))

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(_t((2, 3), 0), _t((2, 3), 1))

    def test_no_grad_records_nothing(self):
        x = _t((3,), 0)
        with ad.no_grad():
            y = ad.exp(x)
        assert not y.requires_grad and y.is_leaf

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0


UNARY = {
    "exp": ad.exp,
    "gelu": ad.gelu,
    "softmax": lambda a: ad.softmax(a, axis=-1),
    "log_softmax": lambda a: ad.log_softmax(a, axis=-1),
    "logsumexp": lambda a: ad.logsumexp(a, axis=-1),
    "layer_norm": ad.layer_norm,
    "l2_normalize": ad.l2_normalize,
    "transpose": ad.transpose,
    "slice_head": lambda a: ad.slice_head(a, 2),
    "pad_head": lambda a: ad.pad_head(a, 6),
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "mean": lambda a: ad.mean_over_axis(a, axis=0),
    "index": lambda a: ad.index(a, (np.array([0, 2, 0]), np.array([1, 1, 3]))),
}


class TestGradients:
    """Every primitive against central differences."""

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        f = UNARY[name]
        x = _t((3, 4), 3)
        w = np.random.default_rng(99).normal(size=f(x).shape)
        assert grad_check(lambda a: ad.sum(ad.mul(f(a), w)), x) < 1e-6

    def test_log_and_sqrt_on_positive(self):
        x = Tensor(np.random.default_rng(4).uniform(0.5, 2.0, size=5), requires_grad=True)
        assert grad_check(lambda a: ad.sum(ad.log(a) + ad.sqrt(a)), x) < 1e-7

    def test_binary_ops(self):
        a, b = _t((2, 3), 5), Tensor(np.random.default_rng(6).uniform(1, 2, (2, 3)),
                                     requires_grad=True)
        params = {"a": a, "b": b}
        f = lambda: ad.sum(ad.div(ad.mul(a, b) - a, b))  # noqa: E731
        assert grad_check(f, params) < 1e-7

    def test_batched_matmul(self):
        a, b = _t((2, 3, 4), 7), _t((2, 4, 5), 8)
        f = lambda: ad.sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b)))  # noqa: E731
        assert grad_check(f, {"a": a, "b": b}) < 1e-7

    def test_embedding_lookup_with_repeats(self):
        table = _t((5, 3), 9)
        ids = np.array([[0, 2, 2], [4, 0, 1]])
        w = np.random.default_rng(1).normal(size=(2, 3, 3))
        assert grad_check(lambda t: ad.sum(ad.mul(ad.embedding_lookup(t, ids), w)), table) < 1e-7

    def test_concat(self):
        a, b = _t((2, 3), 1), _t((2, 2), 2)
        w = np.arange(10.0).reshape(2, 5)
        assert grad_check(lambda: ad.sum(ad.mul(ad.concat([a, b], axis=1), w)),
                          {"a": a, "b": b}) < 1e-8

    def test_relu_away_from_kink(self):
        x = Tensor(np.array([-1.0, -0.3, 0.4, 2.0]), requires_grad=True)
        assert grad_check(lambda a: ad.sum(ad.mul(ad.relu(a), a)), x) < 1e-8

    def test_dropout_uses_fixed_mask(self):
        x = _t((4, 5), 10)
        f = lambda a: ad.sum(ad.mul(ad.dropout(a, 0.3, np.random.default_rng(0)), a))  # noqa: E731
        assert grad_check(f, x) < 1e-7

    def test_layer_norm_with_affine(self):
        x, g, b = _t((3, 6), 11), _t((6,), 12), _t((6,), 13)
        w = np.random.default_rng(2).normal(size=(3, 6))
        f = lambda: ad.sum(ad.mul(ad.layer_norm(x, g, b), w))  # noqa: E731
        assert grad_check(f, {"x": x, "g": g, "b": b}) < 1e-6

    def test_subsampled_check_is_seeded(self):
        x = _t((10, 10), 14)
        f = lambda a: ad.sum(ad.exp(a))  # noqa: E731
        assert grad_check(f, x, coordinates=7, seed=3) == grad_check(f, x, coordinates=7, seed=3)


class TestForwardValues:
    def test_softmax_rows_sum_to_one(self):
        s = ad.softmax(_t((4, 7), 0, scale=50.0)).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_logsumexp_is_stable(self):
        x = Tensor(np.array([1000.0, 1000.0]))
        assert ad.logsumexp(x).item() == pytest.approx(1000.0 + np.log(2.0))

    def test_layer_norm_statistics(self):
        y = ad.layer_norm(_t((5, 16), 1, scale=3.0)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_gelu_reference_points(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        c = np.sqrt(2 / np.pi)
        ref = 0.5 * x.data * (1 + np.tanh(c * (x.data + 0.044715 * x.data ** 3)))
        np.testing.assert_allclose(ad.gelu(x).data, ref, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
    def test_log_softmax_matches_log_of_softmax(self, x):
        t = Tensor(x)
        np.testing.assert_allclose(ad.log_softmax(t).data, np.log(ad.softmax(t).data), atol=1e-9)
