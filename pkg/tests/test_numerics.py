import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionattn import numerics as nx

from conftest import central_fd, grad_check, rel_err


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(nx.matmul(np.eye(3), x).data, x)

    def test_small(self):
        out = nx.matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]]).data
        assert out.tolist() == [[2.0], [4.0]]

    def test_against_triple_loop(self):
        rs = np.random.default_rng(1)
        a, b = rs.standard_normal((5, 7)), rs.standard_normal((7, 3))
        assert np.abs(nx.matmul(a, b).data - triple_loop(a, b)).max() < 1e-12

    def test_left_to_right_is_bit_exact(self):
        rs = np.random.default_rng(2)
        a, b = rs.standard_normal((9, 13)), rs.standard_normal((13, 6))
        assert np.array_equal(nx.matmul(a, b).data, triple_loop(a, b))

    def test_batched_and_shared_weight(self):
        rs = np.random.default_rng(3)
        a = rs.standard_normal((2, 3, 4, 5))
        w = rs.standard_normal((5, 6))
        b = rs.standard_normal((2, 3, 5, 2))
        assert np.allclose(nx.matmul(a, w).data, a @ w, atol=1e-12)
        assert np.allclose(nx.matmul(a, b).data, a @ b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.matmul(np.ones((2, 3)), np.ones((4, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
    def test_associativity(self, m, k, n, p, seed):
        rs = np.random.default_rng(seed)
        a, b, c = rs.standard_normal((m, k)), rs.standard_normal((k, n)), rs.standard_normal((n, p))
        left = nx.matmul(nx.matmul(a, b), c).data
        right = nx.matmul(a, nx.matmul(b, c)).data
        assert np.abs(left - right).max() <= 1e-9 * max(1.0, np.abs(left).max())


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(nx.softmax_lastdim([0.0, 0.0, 0.0]).data, 1 / 3, atol=1e-15)

    def test_neg_inf_entry(self):
        assert nx.softmax_lastdim(np.array([-np.inf, 0.0])).data.tolist() == [0.0, 1.0]

    def test_extended_precision(self):
        mpmath.mp.dps = 50
        ex = [mpmath.exp(v) for v in (1, 2, 3)]
        ref = [float(e / sum(ex)) for e in ex]
        assert np.abs(nx.softmax_lastdim([1.0, 2.0, 3.0]).data - ref).max() < 1e-12

    def test_fully_masked_row_is_zero(self):
        x = np.array([[nx.NEG_SENTINEL, nx.NEG_SENTINEL], [-np.inf, -np.inf], [0.0, 1.0]])
        y = nx.softmax_lastdim(x).data
        assert (y[:2] == 0).all() and abs(y[2].sum() - 1) < 1e-12

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(0).standard_normal((20, 11)) * 30
        assert np.abs(nx.softmax_lastdim(x).data.sum(-1) - 1).max() < 1e-12

    def test_empty(self):
        with pytest.raises(ValueError):
            nx.softmax_lastdim(np.zeros((2, 0)))


class TestLayerNorm:
    def test_constant_row(self):
        assert np.array_equal(nx.layer_norm(np.full((1, 5), 3.0)).data, np.zeros((1, 5)))

    def test_already_normalised(self):
        assert np.allclose(nx.layer_norm([1.0, -1.0], eps=1e-12).data, [1.0, -1.0], atol=1e-9)

    def test_two_pass_oracle(self):
        x = np.random.default_rng(4).standard_normal((6, 17)) * 5 + 2
        out = nx.layer_norm(x, eps=1e-6).data
        ref = np.empty_like(x)
        for r in range(x.shape[0]):
            row = x[r]
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            ref[r] = (row - mu) / np.sqrt(var + 1e-6)
        assert np.abs(out - ref).max() < 1e-10
        assert np.abs(out.mean(-1)).max() < 1e-9
        assert np.abs(out.var(-1) - 1).max() < 1e-6

    def test_needs_two(self):
        with pytest.raises(ValueError):
            nx.layer_norm(np.zeros((3, 1)))


def test_non_finite_is_an_error():
    with pytest.raises(FloatingPointError):
        nx.mul(np.array([1e300]), np.array([1e300]))


class TestBackward:
    def test_linear_analytic(self):
        x = np.array([[1.0], [2.0], [-3.0]])
        W = nx.Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True)
        with nx.GradTape():
            loss = nx.sum(nx.matmul(W, x))
            g = nx.backward(loss)
        assert np.array_equal(g[W], np.outer(np.ones(2), x[:, 0]))

    def test_sum_of_softmax_is_flat(self):
        v = nx.Tensor(np.random.default_rng(1).standard_normal(7), requires_grad=True)
        with nx.GradTape():
            g = nx.backward(nx.sum(nx.softmax_lastdim(v)))
        assert np.abs(g[v]).max() < 1e-15

    def test_disconnected_gets_zero(self):
        a = nx.Tensor(np.ones(3), requires_grad=True)
        b = nx.Tensor(np.ones(3), requires_grad=True)
        with nx.GradTape():
            g = nx.backward(nx.sum(nx.mul(a, a)), params=[a, b])
        assert np.array_equal(g[b], np.zeros(3)) and np.array_equal(g[a], 2 * np.ones(3))

    def test_non_scalar(self):
        a = nx.Tensor(np.ones(3), requires_grad=True)
        with nx.GradTape():
            with pytest.raises(ValueError):
                nx.backward(nx.mul(a, a))

    def test_each_node_visited_once(self):
        a = nx.Tensor(np.array([2.0]), requires_grad=True)
        calls = []
        with nx.GradTape() as tape:
            b = nx.mul(a, a)
            c = nx.add(b, b)
            loss = nx.sum(c)
            for node in tape.nodes:
                fn = node.backward_fn
                node.backward_fn = (lambda f, n: lambda g: (calls.append(n), f(g))[1])(fn, node)
            g = nx.backward(loss)
        assert len(calls) == len(tape.nodes) == len(set(map(id, calls)))
        assert g[a][0] == 8.0


def _rand(shape, seed):
    return nx.Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)


PRIMITIVE_CASES = {
    "add_broadcast": lambda a, b: nx.sum(nx.mul(nx.add(a, nx.take(b, 1, 0, 1)), a)),
    "sub": lambda a, b: nx.sum(nx.mul(nx.sub(a, b), nx.sub(a, b))),
    "mul": lambda a, b: nx.sum(nx.mul(nx.mul(a, b), a)),
    "scale": lambda a, b: nx.sum(nx.mul(nx.scale(a, -2.5), b)),
    "matmul": lambda a, b: nx.sum(nx.mul(nx.matmul(a, nx.transpose(b)), nx.matmul(a, nx.transpose(b)))),
    "bmm": lambda a, b: nx.sum(nx.matmul(nx.reshape(a, (3, 4, 1)), nx.reshape(b, (3, 1, 4)))),
    "reshape_permute": lambda a, b: nx.sum(nx.mul(nx.permute(nx.reshape(a, (2, 2, 3)), (2, 0, 1)),
                                                  nx.permute(nx.reshape(b, (2, 2, 3)), (2, 0, 1)))),
    "concat_take": lambda a, b: nx.sum(nx.mul(nx.concat([a, b], 1), nx.concat([b, a], 1))),
    "split": lambda a, b: nx.sum(nx.mul(*nx.split(nx.mul(a, b), [2, 2], axis=1))),
    "sum_axis": lambda a, b: nx.sum(nx.mul(nx.sum(nx.mul(a, b), axis=1), nx.sum(a, axis=1))),
    "mean_keepdims": lambda a, b: nx.sum(nx.mul(nx.mean(a, axis=1, keepdims=True), b)),
    "softmax": lambda a, b: nx.sum(nx.mul(nx.softmax_lastdim(a), b)),
    "layer_norm": lambda a, b: nx.sum(nx.mul(nx.layer_norm(a), b)),
    "silu": lambda a, b: nx.sum(nx.mul(nx.silu(a), b)),
    "gelu": lambda a, b: nx.sum(nx.mul(nx.gelu(a), b)),
    "mse": lambda a, b: nx.mse(nx.mul(a, b), np.ones((3, 4))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    a, b = _rand((3, 4), 10), _rand((3, 4), 11)
    worst, n = grad_check(lambda: PRIMITIVE_CASES[name](a, b), [a, b])
    assert n == 24 and worst < 1e-4


def test_two_layer_network_gradients():
    rs = np.random.default_rng(5)
    x = rs.standard_normal((6, 4))
    W1, b1 = _rand((4, 8), 1), _rand((8,), 2)
    W2, b2 = _rand((8, 3), 3), _rand((3,), 4)
    target = rs.standard_normal((6, 3))

    def loss():
        h = nx.gelu(nx.layer_norm(nx.add(nx.matmul(x, W1), b1)))
        return nx.mse(nx.add(nx.matmul(h, W2), b2), target)

    worst, _ = grad_check(loss, [W1, b1, W2, b2])
    assert worst < 1e-4


class TestAdamW:
    def test_zero_lr_leaves_params(self):
        p = nx.Tensor(np.ones(3), requires_grad=True)
        opt = nx.AdamW([p], lr=0.0, weight_decay=0.1)
        opt.step({p: np.ones(3)})
        assert np.array_equal(p.data, np.ones(3))

    def test_first_step_matches_update_rule(self):
        p = nx.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        g = np.array([0.5, -0.1])
        opt = nx.AdamW([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
        opt.step({p: g})
        m, v = 0.1 * g / 0.1, 0.001 * g * g / 0.001
        ref = np.array([1.0, -2.0]) - 0.1 * (m / (np.sqrt(v) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
        assert np.allclose(p.data, ref, rtol=0, atol=1e-15)

    def test_minimises_quadratic(self):
        p = nx.Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = nx.AdamW([p], lr=0.05, weight_decay=0.0)
        for _ in range(500):
            with nx.GradTape():
                g = nx.backward(nx.sum(nx.mul(p, p)))
            opt.step(g)
        assert np.abs(p.data).max() < 1e-2
