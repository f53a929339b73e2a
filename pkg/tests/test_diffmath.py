import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hierlogic import diffmath as dm
from hierlogic import kb as kbm
from hierlogic.errors import HeadDivisibility, NonFiniteError, NonScalarLoss, ShapeMismatch

from conftest import small_kbs


def _p(rng, *shape):
    return dm.parameter(rng.normal(size=shape), dtype=np.float64)


def test_basic_ops():
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dm.matmul(np.eye(2), A).data, A)
    assert dm.concat([np.array([1.0]), np.array([2.0])]).data.tolist() == [1.0, 2.0]
    b = np.array([0.5, -1.0])
    assert np.array_equal(dm.affine(np.ones((3, 2)), np.zeros((2, 2)), b).data, np.tile(b, (3, 1)))


def test_softmax():
    assert np.allclose(dm.softmax_rows(np.zeros(2)).data, [0.5, 0.5])
    s = dm.softmax_rows(np.array([1000.0, 0.0])).data
    assert np.allclose(s, [1.0, 0.0], atol=1e-6)
    for x in (-50.0, 0.0, 3.0):
        assert dm.softmax_rows(np.array([x])).data.tolist() == [1.0]


def test_sigmoid_values():
    assert dm.sigmoid(np.array(0.0)).data == 0.5
    assert abs(float(dm.sigmoid(np.array(1.0)).data) - 0.7310586) < 1e-7
    assert float(dm.sigmoid(np.array(-1000.0, dtype=np.float64)).data) >= 0.0


def test_cross_entropy_values():
    assert abs(float(dm.cross_entropy(1.0, np.array(1.0)).data)) < 1e-9
    assert abs(float(dm.cross_entropy(0.0, np.array(1.0, dtype=np.float64)).data)
               - (-np.log(dm.LOG_EPS))) < 1e-3
    assert abs(float(dm.cross_entropy(1.0, np.array(0.5, dtype=np.float64)).data) - 0.693147) < 1e-6


def test_spmv_toy3(toy3_store):
    succ = toy3_store.vocab.id("Succ")
    out = dm.spmv_const(toy3_store.matrix(succ), kbm.one_hot(0, 3), transpose=True)
    assert out.data.tolist() == [0, 1, 0]


def test_spmv_trivial_matrices():
    v = np.array([0.3, 0.0, 2.0])
    assert np.all(dm.spmv_const(sp.csr_matrix((3, 3)), v).data == 0)
    assert np.array_equal(dm.spmv_const(sp.identity(3, format="csr"), v).data, v)


def test_mha_shapes():
    rng = np.random.default_rng(0)
    w = dm.MHAWeights(*(_p(rng, 8, 8) for _ in range(4)))
    O, S = dm.mha(_p(rng, 3, 8), _p(rng, 5, 8), w, heads=4)
    assert O.shape == (3, 8) and S.shape == (3, 5)
    assert np.allclose(S.data.sum(axis=1), 1.0, atol=1e-6)
    w1 = dm.MHAWeights(*(_p(rng, 4, 4) for _ in range(4)))
    _, S1 = dm.mha(_p(rng, 1, 4), _p(rng, 1, 4), w1, heads=2)
    assert S1.data.tolist() == [[1.0]]
    with pytest.raises(HeadDivisibility):
        dm.mha(_p(rng, 1, 8), _p(rng, 1, 8), w, heads=3)


def test_backward_square():
    x = dm.parameter(np.array(3.0), dtype=np.float64)
    (g,) = dm.backward(x * x, [x])
    assert float(g) == 6.0


def test_constant_loss_zero_grad():
    rng = np.random.default_rng(1)
    x = _p(rng, 3)
    loss = dm.tsum(x * 0.0)
    (g,) = dm.backward(loss, [x])
    assert np.all(g == 0)


def test_nonscalar_loss():
    x = dm.parameter(np.ones(2), dtype=np.float64)
    with pytest.raises(NonScalarLoss):
        dm.backward(x * 2.0, [x])


def test_non_finite_is_error():
    with pytest.raises(NonFiniteError):
        dm.log(np.array([-1.0, 1.0]))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def _mha_loss(seed):
    rng = np.random.default_rng(seed)
    Q, V = _p(rng, 3, 8), _p(rng, 5, 8)
    w1 = dm.MHAWeights(*(_p(rng, 8, 8) for _ in range(4)))
    w2 = dm.MHAWeights(*(_p(rng, 8, 8) for _ in range(4)))
    y = (rng.random(3) > 0.5).astype(float)
    params = [Q, V, *w1.tensors(), *w2.tensors()]

    def fn():
        h, _ = dm.mha(Q, V, w1, heads=4)
        _, S = dm.mha(h, V, w2, heads=1)
        return dm.cross_entropy(y, S[:, 0])

    return fn, params


def test_two_layer_mha_gradient():
    with dm.precision(np.float64):
        fn, params = _mha_loss(0)
        assert dm.finite_diff_check(fn, params, max_coords=6) < 1e-4


UNARY_OPS = {
    "sigmoid": dm.sigmoid,
    "relu": lambda x: dm.relu(x + 0.05),
    "exp": lambda x: dm.exp(x * 0.5),
    "log": lambda x: dm.log(dm.exp(x)),
    "softmax": dm.softmax_rows,
    "normalize": lambda x: dm.normalize_rows(dm.exp(x)),
    "transpose": dm.transpose,
    "reshape": lambda x: dm.reshape(x, (-1,)),
    "getitem": lambda x: x[1:, :2],
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
@pytest.mark.parametrize("seed", range(10))
def test_unary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = _p(rng, 3, 4)
    w = rng.normal(size=UNARY_OPS[name](x).shape)
    with dm.precision(np.float64):
        err = dm.finite_diff_check(lambda: dm.tsum(UNARY_OPS[name](x) * w), [x])
    assert err < 1e-4


BINARY_OPS = {
    "add": (dm.add, (3, 4), (4,)),
    "sub": (dm.sub, (3, 4), (3, 4)),
    "mul": (dm.mul, (3, 4), (3, 1)),
    "matmul": (dm.matmul, (3, 4), (4, 2)),
    "batched_matmul": (dm.matmul, (2, 3, 4), (2, 4, 2)),
    "einsum": (lambda a, b: dm.einsum("ij,jk->ik", a, b), (3, 4), (4, 2)),
    "concat": (lambda a, b: dm.concat([a, b], axis=0), (3, 4), (2, 4)),
    "stack": (lambda a, b: dm.stack([a, b], axis=0), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
@pytest.mark.parametrize("seed", range(10))
def test_binary_op_gradients(name, seed):
    fn, sa, sb = BINARY_OPS[name]
    rng = np.random.default_rng(seed)
    a, b = _p(rng, *sa), _p(rng, *sb)
    w = rng.normal(size=fn(a, b).shape)
    with dm.precision(np.float64):
        err = dm.finite_diff_check(lambda: dm.tsum(fn(a, b) * w), [a, b])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_and_spmv_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    M = sp.random(6, 6, density=0.4, random_state=seed, format="csr")
    M.data[:] = 1.0
    v = _p(rng, 6, 2)
    exclude = (np.array([0]), np.array([M.indices[0]] if M.nnz else [0]), np.array([0]))
    w1, w2 = rng.normal(size=(3, 6)), rng.normal(size=(6, 2))
    with dm.precision(np.float64):
        e1 = dm.finite_diff_check(lambda: dm.tsum(dm.layer_norm(x, g, b) * w1), [x, g, b])
        e2 = dm.finite_diff_check(lambda: dm.tsum(dm.spmv_const(M, v, True) * w2), [v])
        e3 = dm.finite_diff_check(lambda: dm.tsum(dm.spmv_const(M, v, False, exclude) * w2), [v])
        y = (rng.random(6) > 0.5).astype(float)
        e4 = dm.finite_diff_check(lambda: dm.cross_entropy(y, dm.sigmoid(x[0])), [x])
    assert max(e1, e2, e3, e4) < 1e-4


@settings(max_examples=25, deadline=None)
@given(small_kbs(), st.integers(0, 10_000))
def test_spmv_matches_edge_enumeration(kb, seed):
    store = kbm.build_matrices(kb)
    rng = np.random.default_rng(seed)
    v = rng.random(store.n)
    for k in range(store.K):
        expect = np.zeros(store.n)
        r, c = store.coords[k]
        for i, j in zip(r.tolist(), c.tolist()):
            expect[j] += v[i]
        got = dm.spmv_const(store.matrix(k), v, transpose=True).data
        assert np.array_equal(got, expect)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_attention_rows_stochastic(q, v, seed):
    rng = np.random.default_rng(seed)
    w = dm.MHAWeights(*(_p(rng, 8, 8) for _ in range(4)))
    _, S = dm.mha(_p(rng, q, 8), _p(rng, v, 8), w, heads=4)
    assert np.all(S.data >= 0)
    assert np.allclose(S.data.sum(axis=1), 1.0, atol=1e-6)
    s = dm.softmax_rows(rng.normal(size=(q, v)) * 30).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_forward_deterministic():
    fn1, _ = _mha_loss(4)
    fn2, _ = _mha_loss(4)
    assert fn1().data.tobytes() == fn2().data.tobytes()
