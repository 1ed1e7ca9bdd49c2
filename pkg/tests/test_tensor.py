"""Tensor core: forward semantics, backward rules, gradient checking."""

import numpy as np
import pytest

import langseg.tensor as T
from langseg.errors import ContractError, NumericError, ShapeError
from langseg.rng import Rng
from langseg.tensor import Tensor, backward, grad_check, tape


class TestMatmul:
    def test_identity(self, make_tensor):
        a = make_tensor((3, 4))
        out = T.matmul(a, T.identity(4))
        assert np.array_equal(out.data, a.data)

    def test_one_by_one(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_matches_triple_loop_oracle(self, make_tensor):
        a, b = make_tensor((3, 4)), make_tensor((4, 2))
        out = T.matmul(a, b)
        expected = np.zeros((3, 2), dtype=np.float64)
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += float(a.data[i, k]) * float(b.data[k, j])
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self, make_tensor):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(make_tensor((3, 4)), make_tensor((3, 2)))

    def test_batched(self, make_tensor):
        a, b = make_tensor((2, 3, 4)), make_tensor((2, 4, 2))
        out = T.matmul(a, b)
        assert out.shape == (2, 3, 2)
        assert np.allclose(out.data[1], a.data[1] @ b.data[1], atol=1e-6)


class TestConv2d:
    def test_1x1_kernel_is_channel_matmul(self, make_tensor):
        x, w = make_tensor((3, 4, 4)), make_tensor((5, 3, 1, 1))
        out = T.conv2d(x, w, stride=1, pad=0)
        oracle = np.einsum("oc,chw->ohw", w.data.reshape(5, 3), x.data)
        assert np.allclose(out.data, oracle, atol=1e-6)

    def test_identity_kernel(self, make_tensor):
        x = make_tensor((1, 5, 5))
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(w), stride=1, pad=1)
        assert np.array_equal(out.data, x.data)

    def test_matches_sliding_window_oracle(self, make_tensor):
        x, w = make_tensor((2, 4, 4)), make_tensor((3, 2, 2, 2))
        out = T.conv2d(x, w, stride=1, pad=0)
        assert out.shape == (3, 3, 3)
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    patch = x.data[:, i:i + 2, j:j + 2]
                    assert out.data[o, i, j] == pytest.approx(
                        float((patch * w.data[o]).sum()), abs=1e-5)

    def test_output_size_formula(self, make_tensor):
        x, w = make_tensor((1, 7, 7)), make_tensor((2, 1, 3, 3))
        assert T.conv2d(x, w, stride=2, pad=1).shape == (2, 4, 4)

    def test_kernel_larger_than_padded_input(self, make_tensor):
        with pytest.raises(ShapeError, match="larger than padded"):
            T.conv2d(make_tensor((1, 3, 3)), make_tensor((1, 1, 5, 5)), 1, 0)

    def test_channel_mismatch(self, make_tensor):
        with pytest.raises(ShapeError):
            T.conv2d(make_tensor((2, 4, 4)), make_tensor((1, 3, 2, 2)), 1, 0)


class TestSoftmax:
    def test_rows_sum_to_one_and_positive(self, rng):
        for _ in range(100):
            x = Tensor(rng.uniform((3, 7), -5, 5))
            s = T.softmax(x, -1)
            assert np.all(s.data > 0)
            assert np.allclose(s.data.sum(-1), 1.0, atol=1e-6)

    def test_constant_row(self):
        s = T.softmax(Tensor([3.0, 3.0, 3.0, 3.0]), 0)
        assert np.allclose(s.data, 0.25, atol=1e-7)

    def test_shift_invariance(self, rng):
        x = rng.uniform((6,), -2, 2)
        a = T.softmax(Tensor(x), 0)
        b = T.softmax(Tensor(x + 10.0), 0)
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_invalid_axis(self, make_tensor):
        with pytest.raises(IndexError):
            T.softmax(make_tensor((3, 4)), 2)


class TestLayerNorm:
    def test_moments(self, rng):
        x = Tensor(rng.uniform((4, 8), -3, 3))
        out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.allclose(out.data.mean(-1), 0.0, atol=1e-5)
        assert np.allclose(out.data.var(-1), 1.0, atol=1e-3)

    def test_constant_row_absorbed_by_eps(self):
        x = Tensor(np.full((1, 6), 2.5, dtype=np.float32))
        out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.allclose(out.data, 0.0, atol=1e-7)

    def test_matches_formula_oracle(self, rng):
        x = rng.uniform((5,), -2, 2).astype(np.float64)
        g = rng.uniform((5,), 0.5, 1.5).astype(np.float64)
        b = rng.uniform((5,), -0.5, 0.5).astype(np.float64)
        eps = 1e-5
        mu, var = x.mean(), x.var()
        expected = (x - mu) / np.sqrt(var + eps) * g + b
        out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=eps)
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_affine_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(rng.uniform((2, 4))), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)))


class TestUpsampleNearest2x:
    def test_single_value_replicates(self):
        out = T.upsample_nearest2x(Tensor(np.full((1, 1, 1), 7.0)))
        assert out.shape == (1, 2, 2)
        assert np.all(out.data == 7.0)

    def test_shape_contract(self, make_tensor):
        assert T.upsample_nearest2x(make_tensor((3, 4, 5))).shape == (3, 8, 10)

    def test_gradient_of_sum_is_four(self, make_tensor):
        x = make_tensor((2, 3, 3))
        backward(T.upsample_nearest2x(x).sum())
        assert np.all(x.grad == 4.0)
        rep = grad_check(lambda: T.upsample_nearest2x(x).mean(), [x])
        assert rep.passed


class TestBackward:
    def test_product_rule(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(5.0, requires_grad=True)
        backward(x * y)
        assert float(x.grad) == 5.0
        assert float(y.grad) == 3.0

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(T.relu(x).sum())
        assert np.array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_matmul_matches_finite_differences(self, make_tensor):
        a, b = make_tensor((3, 4)), make_tensor((4, 2))
        rep = grad_check(lambda: T.matmul(a, b).mean(), [a, b])
        assert rep.passed
        assert rep.max_rel_err < 1e-3

    def test_rejects_non_scalar(self, make_tensor):
        with pytest.raises(ContractError):
            backward(make_tensor((2, 2)))

    def test_fanout_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        backward(x * x + x)
        assert float(x.grad) == pytest.approx(5.0)


class TestGradCheck:
    def test_quadratic_passes(self, make_tensor):
        theta = make_tensor((8,))
        rep = grad_check(lambda: (theta * theta).sum(), [theta], tol=1e-4)
        assert rep.passed

    def test_corrupted_gradient_fails(self, make_tensor):
        x = make_tensor((6,))

        def doubled_grad_sum():
            out = Tensor(x.data.sum())
            out.requires_grad = True
            out._parents = (x,)

            def _bw():
                T._accum(x, 2.0 * np.ones_like(x.data) * out.grad)
            out._backward = _bw
            return out

        rep = grad_check(doubled_grad_sum, [x])
        assert not rep.passed

    def test_non_finite_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(NumericError):
            grad_check(lambda: T.log(x - 1.0).sum(), [x])

    def test_sampled_subset(self, make_tensor):
        theta = make_tensor((30,))
        rep = grad_check(lambda: (theta * theta).mean(), [theta],
                         samples_per_param=5, rng=Rng(3))
        assert rep.passed


def _op_cases(m):
    return {
        "add": lambda x=m((3, 4)), y=m((3, 4)): (x + y).mean(),
        "mul": lambda x=m((3, 4)), y=m((3, 4)): (x * y).mean(),
        "div": lambda x=m((3, 4)), y=m((3, 4), 0.5, 2.0): (x / y).mean(),
        "sigmoid": lambda x=m((8,)): T.sigmoid(x).mean(),
        "log": lambda x=m((8,), 0.2, 3.0): T.log(x).mean(),
        "exp": lambda x=m((8,)): T.exp(x).mean(),
        "transpose": lambda x=m((2, 3, 4)): T.transpose(x, (2, 0, 1)).mean(),
        "reshape": lambda x=m((2, 6)): T.reshape(x, (3, 4)).mean(),
        "concat": lambda x=m((2, 3)), y=m((2, 2)): T.concat([x, y], 1).mean(),
        "softmax": lambda x=m((3, 5)): (T.softmax(x, -1)
                                        * Tensor(np.arange(5.0))).mean(),
        "layer_norm": lambda x=m((3, 6)), g=m((6,), 0.5, 1.5), b=m((6,)):
            (T.layer_norm(x, g, b) * Tensor(np.arange(18.0).reshape(3, 6))).mean(),
    }


@pytest.mark.parametrize("name", list(_op_cases(lambda *a, **k: None)))
def test_op_gradients_match_finite_differences(name, make_tensor):
    """Analytic gradients agree with central differences on small shapes."""
    f = _op_cases(make_tensor)[name]
    params = [p for p in f.__defaults__ if isinstance(p, Tensor)]
    rep = grad_check(f, params)
    assert rep.passed, f"{name}: {rep.max_rel_err}"


class TestTape:
    def test_topological_order(self, make_tensor):
        a, b = make_tensor((2, 2)), make_tensor((2, 2))
        loss = ((a @ b) + a * 2.0).sum()
        order = tape(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]

    def test_single_visit(self, make_tensor):
        a = make_tensor((2, 2))
        shared = a * a
        loss = (shared + shared).sum()
        order = tape(loss)
        assert len(order) == len({id(n) for n in order})

    def test_replay_is_bitwise_identical(self):
        def build():
            rng = Rng(77)
            x = Tensor(rng.uniform((4, 4), -1, 1), requires_grad=True)
            y = Tensor(rng.uniform((4, 4), -1, 1))
            return T.softmax(x @ y, -1).sum()
        a, b = build(), build()
        assert a.data.tobytes() == b.data.tobytes()


class TestRng:
    def test_same_seed_same_sequence(self):
        a, b = Rng(99), Rng(99)
        assert np.array_equal(a.u64(16), b.u64(16))
        assert a.random() == b.random()

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).u64(8), Rng(2).u64(8))

    def test_uniform_range_and_dtype(self):
        u = Rng(5).uniform((1000,), -2.0, 3.0)
        assert u.dtype == np.float32
        assert u.min() >= -2.0 and u.max() < 3.0

    def test_split_streams_independent(self):
        base = Rng(7)
        a, b = base.split(0), base.split(1)
        assert not np.array_equal(a.u64(8), b.u64(8))
        assert np.array_equal(Rng(7).split(0).u64(8), Rng(7).split(0).u64(8))

    def test_state_roundtrip(self):
        rng = Rng(11)
        rng.u64(5)
        clone = Rng.from_state(rng.state())
        assert np.array_equal(rng.u64(4), clone.u64(4))

    def test_shuffle_deterministic(self):
        items = list(range(10))
        Rng(3).shuffle(items)
        items2 = list(range(10))
        Rng(3).shuffle(items2)
        assert items == items2
        assert sorted(items) == list(range(10))
