import numpy as np
import pytest

import nie.tensor as T
from nie.errors import ShapeError, TapeError
from nie.graph import Graph
from nie.tensor import GradTape, agg_slots


def fd_gradient(fn, x, h=1e-6):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = fn(x)
        x[idx] = orig - h
        fm = fn(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def test_sum_gradient_is_ones():
    tape = GradTape()
    x = tape.input(np.arange(6.0).reshape(2, 3))
    grads = tape.backward(T.sum_all(x))
    assert np.array_equal(grads.of(x), np.ones((2, 3)))


def test_half_frobenius_matches_finite_differences():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((4, 3))
    X0 = rng.standard_normal((3, 5))

    tape = GradTape()
    x = tape.input(X0.copy())
    y = T.matmul(W, x)
    s = T.scale(T.sum_all(T.mul(y, y)), 0.5)
    analytic = tape.backward(s).of(x)

    fd = fd_gradient(lambda X: 0.5 * np.sum((W @ X) ** 2), X0.copy(), h=1e-4)
    rel = np.abs(analytic - fd) / (1e-8 + np.abs(fd))
    assert rel.max() < 1e-4


def test_unreachable_checkpoint_gets_zero_gradient():
    tape = GradTape()
    x = tape.input(np.ones((2, 2)))
    z = tape.input(np.ones((3, 3)))
    tape.checkpoint("unused", z)
    grads = tape.backward(T.sum_all(x))
    assert np.array_equal(grads.checkpoint("unused"), np.zeros((3, 3)))


def test_backward_requires_scalar():
    tape = GradTape()
    x = tape.input(np.ones((2, 2)))
    y = T.relu(x)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(y)


def test_tape_consumed_on_second_backward():
    tape = GradTape()
    x = tape.input(np.ones((2, 2)))
    s = T.sum_all(x)
    tape.backward(s)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(s)


def test_mixing_tapes_rejected():
    a = GradTape().input(np.ones((2, 2)))
    b = GradTape().input(np.ones((2, 2)))
    with pytest.raises(TapeError):
        T.add(a, b)


def test_shape_mismatch_rejected():
    tape = GradTape()
    x = tape.input(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        T.matmul(x, np.ones((2, 2)))


def test_non_finite_input_rejected():
    tape = GradTape()
    with pytest.raises(ShapeError, match="non-finite"):
        tape.input(np.array([[np.nan]]))


def test_softmax_extreme_logits_saturate_without_overflow():
    out = T.softmax_rows(np.array([[1000.0, 0.0, 0.0]]))
    assert np.isfinite(out).all()
    assert out[0, 0] == pytest.approx(1.0)
    assert abs(out.sum() - 1.0) < 1e-12


def test_relu_subgradient_zero_at_zero():
    tape = GradTape()
    x = tape.input(np.array([[-1.0, 0.0, 2.0]]))
    grads = tape.backward(T.sum_all(T.relu(x)))
    assert grads.of(x).tolist() == [[0.0, 0.0, 1.0]]


def test_untaped_ops_return_plain_arrays():
    out = T.matmul(np.eye(2), np.ones((2, 2)))
    assert isinstance(out, np.ndarray)


def test_ops_against_finite_differences():
    rng = np.random.default_rng(1)
    A0 = rng.standard_normal((3, 4))

    C = rng.standard_normal((3, 4))  # plain sums of softmax rows are constant
    cases = {
        "softmax": lambda a, taped: _sum(T.mul(T.softmax_rows(a), C), taped),
        "sigmoid": lambda a, taped: _sum(T.sigmoid(a), taped),
        "leaky": lambda a, taped: _sum(T.leaky_relu(a, 0.2), taped),
        "abs": lambda a, taped: _sum(T.absolute(a), taped),
        "colsum_sq": lambda a, taped: _sum(T.mul(T.column_sums(a), T.column_sums(a)), taped),
        "rowsum_sq": lambda a, taped: _sum(T.mul(T.row_sums(a), T.row_sums(a)), taped),
        "gather": lambda a, taped: _sum(T.gather_rows(a, np.array([0, 2, 2])), taped),
    }
    for name, fn in cases.items():
        tape = GradTape()
        a = tape.input(A0.copy())
        analytic = tape.backward(fn(a, True)).of(a)
        fd = fd_gradient(lambda X: float(fn(X, False)), A0.copy())
        rel = np.abs(analytic - fd) / (1e-8 + np.abs(fd))
        assert rel.max() < 1e-4, name


def _sum(x, taped):
    s = T.sum_all(x)
    return s if taped else T._val(s)[0, 0]


def test_spmm_star_aggregation(star4):
    agg = agg_slots(star4, with_self_loops=True)
    coeffs = np.ones(agg.num_slots)
    out = T.spmm_aggregate(agg, coeffs, star4.features)
    # center row = own row + all leaf rows
    assert np.allclose(out[0], star4.features[0] + star4.features[1:].sum(axis=0))
    assert np.allclose(out[1], star4.features[1] + star4.features[0])


def test_spmm_and_edge_softmax_gradients(triangle):
    rng = np.random.default_rng(3)
    agg = agg_slots(triangle, with_self_loops=True)
    H0 = rng.standard_normal((3, 2))
    C0 = rng.standard_normal(agg.num_slots)

    def forward(h, c, taped):
        alpha = T.edge_softmax(c, agg)
        out = T.spmm_aggregate(agg, alpha, h)
        s = T.sum_all(T.mul(out, out))
        return s if taped else T._val(s)[0, 0]

    tape = GradTape()
    h = tape.input(H0.copy())
    c = tape.input(C0.copy())
    grads = tape.backward(forward(h, c, True))
    fd_h = fd_gradient(lambda X: forward(X, C0.copy(), False), H0.copy())
    fd_c = fd_gradient(lambda X: forward(H0.copy(), X, False), C0.copy())
    assert (np.abs(grads.of(h) - fd_h) / (1e-8 + np.abs(fd_h))).max() < 1e-4
    assert (np.abs(grads.of(c) - fd_c) / (1e-8 + np.abs(fd_c))).max() < 1e-4


def test_edge_softmax_rows_sum_to_one_with_empty_segments():
    g = Graph.from_edges(4, np.array([[0, 1], [1, 2]]), np.zeros((4, 1)))
    view_agg = agg_slots(g, with_self_loops=True)
    logits = np.linspace(-1, 1, view_agg.num_slots)
    alpha = T.edge_softmax(logits, view_agg)
    sums = np.bincount(view_agg.dst, weights=alpha, minlength=4)
    # node 3 is isolated but still has a self slot; all segments normalize
    assert np.allclose(sums, 1.0)


def test_losses_against_finite_differences():
    rng = np.random.default_rng(4)
    Z0 = rng.standard_normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    idx = np.array([0, 2, 3])

    tape = GradTape()
    z = tape.input(Z0.copy())
    analytic = tape.backward(T.cross_entropy_with_logits(z, labels, idx)).of(z)
    fd = fd_gradient(
        lambda X: float(T._val(T.cross_entropy_with_logits(X, labels, idx))[0, 0]), Z0.copy()
    )
    assert (np.abs(analytic - fd) / (1e-8 + np.abs(fd))).max() < 1e-4

    y = np.array([1.0, 0.0, 1.0, 0.0, 1.0])
    tape = GradTape()
    z = tape.input(Z0[:, 0].reshape(-1, 1).copy())
    analytic = tape.backward(T.bce_with_logits(z, y)).of(z)
    fd = fd_gradient(
        lambda X: float(T._val(T.bce_with_logits(X, y))[0, 0]), Z0[:, 0].reshape(-1, 1).copy()
    )
    assert (np.abs(analytic - fd) / (1e-8 + np.abs(fd))).max() < 1e-4


def test_chain_rule_composition_split():
    # gradient of g(f(x)) equals the two-stage chain: backprop g to the cut,
    # then backprop sum(f(x) * cotangent)
    rng = np.random.default_rng(5)
    X0 = rng.standard_normal((3, 3))
    W = rng.standard_normal((3, 3))

    tape = GradTape()
    x = tape.input(X0.copy())
    mid = T.relu(T.matmul(x, W))
    s = T.sum_all(T.mul(T.sigmoid(mid), T.sigmoid(mid)))
    fused = tape.backward(s).of(x)

    tape2 = GradTape()
    mid_leaf = tape2.input(np.maximum(X0 @ W, 0.0))
    s2 = T.sum_all(T.mul(T.sigmoid(mid_leaf), T.sigmoid(mid_leaf)))
    cotangent = tape2.backward(s2).of(mid_leaf)

    tape3 = GradTape()
    x3 = tape3.input(X0.copy())
    s3 = T.sum_all(T.mul(T.relu(T.matmul(x3, W)), cotangent))
    chained = tape3.backward(s3).of(x3)
    assert np.allclose(fused, chained, atol=1e-12)


def test_sparse_alias_matches_dense_path():
    import scipy.sparse as sp

    rng = np.random.default_rng(6)
    X0 = (rng.random((6, 8)) < 0.3) * rng.standard_normal((6, 8))
    W0 = rng.standard_normal((8, 4))

    tape = GradTape()
    x = tape.input(X0.copy(), sparse_alias=sp.csr_matrix(X0))
    w = tape.input(W0.copy())
    s = T.sum_all(T.mul(T.matmul(x, w), T.matmul(x, w)))
    g_sparse = tape.backward(s)
    gw_sparse = g_sparse.of(w)

    tape = GradTape()
    x = tape.input(X0.copy())
    w = tape.input(W0.copy())
    s = T.sum_all(T.mul(T.matmul(x, w), T.matmul(x, w)))
    gw_dense = tape.backward(s).of(w)
    assert np.allclose(gw_sparse, gw_dense, atol=1e-10)
