import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nsdelab import autodiff as ad
from nsdelab.autodiff import ShapeError, Tape, backward, grad_check


def test_matmul_identity():
    t = Tape()
    m = t.const([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(t.const(np.eye(2)), m)
    np.testing.assert_array_equal(out.value, [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_symmetric():
    t = Tape()
    np.testing.assert_array_equal(ad.softmax(t.const([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_cross_entropy_at_zero_logits_is_ln2():
    t = Tape()
    loss = ad.cross_entropy(t.const([[0.0, 0.0]]), [0])
    assert float(loss.value) == pytest.approx(math.log(2.0), rel=1e-15)


def test_cross_entropy_reductions_agree():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, 5)
    t = Tape()
    lx = t.const(x)
    per = ad.cross_entropy(lx, y, reduction="none").value
    # independent evaluation of -log softmax
    ref = -np.log(np.exp(x[np.arange(5), y]) / np.exp(x).sum(axis=1))
    np.testing.assert_allclose(per, ref, rtol=1e-13)
    assert float(ad.cross_entropy(lx, y, "sum").value) == pytest.approx(ref.sum(), rel=1e-13)
    assert float(ad.cross_entropy(lx, y, "mean").value) == pytest.approx(ref.mean(), rel=1e-13)
    with pytest.raises(ValueError):
        ad.cross_entropy(lx, y, "median")


def test_square_gradient():
    t = Tape()
    x = t.param([3.0])
    (g,) = backward(t, ad.sum(x * x))
    assert g[0] == 6.0


def test_constant_output_gives_zero_gradient():
    t = Tape()
    x = t.param([3.0])
    c = t.const([5.0])
    (g,) = backward(t, ad.sum(c))
    np.testing.assert_array_equal(g, [0.0])
    assert x.index in t.params


def test_unreached_leaf_gets_zero():
    t = Tape()
    a = t.param(np.ones((2, 2)))
    b = t.param(np.ones(3))
    ga, gb = backward(t, ad.squared_norm(a))
    np.testing.assert_array_equal(ga, 2 * np.ones((2, 2)))
    np.testing.assert_array_equal(gb, np.zeros(3))
    assert b.shape == (3,)


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.param(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        backward(t, x * 2.0)


@pytest.mark.parametrize(
    "op,a,b",
    [
        ("matmul", (2, 3), (2, 3)),
        ("add", (2, 3), (4, 3)),
        ("concat", (2, 3), (3, 3)),
    ],
)
def test_shape_errors_name_op_and_shapes(op, a, b):
    t = Tape()
    x, y = t.const(np.ones(a)), t.const(np.ones(b))
    fn = {"matmul": ad.matmul, "add": ad.add, "concat": lambda p, q: ad.concat([p, q])}[op]
    with pytest.raises(ShapeError) as exc:
        fn(x, y)
    assert exc.value.op == op
    assert str(a) in str(exc.value) and str(b) in str(exc.value)


def test_log_rejects_nonpositive():
    t = Tape()
    with pytest.raises(ValueError):
        ad.log(t.const([0.0, 1.0]))


def test_relu_gradient_zero_at_kink():
    t = Tape()
    x = t.param([0.0, -1.0, 2.0])
    (g,) = backward(t, ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_values_are_immutable():
    t = Tape()
    x = t.param(np.ones(2))
    with pytest.raises(ValueError):
        x.value[0] = 2.0


def test_tape_topological_and_replay_exact():
    rng = np.random.default_rng(1)
    t = Tape()
    W = t.param(rng.normal(size=(3, 4)))
    x = t.const(rng.normal(size=(5, 3)))
    h = ad.tanh(x @ W)
    loss = ad.cross_entropy(ad.concat([h, ad.relu(h)]), rng.integers(0, 8, 5))
    for i, parents in enumerate(t.parents):
        assert all(p < i for p in parents)
    replayed = t.replay()
    for a, b in zip(replayed, t.values):
        assert np.array_equal(a, b)
    assert loss.index == len(t) - 1


# ---------------------------------------------------------------- grad checks


def _per_op_builders():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 3, 4)
    return {
        "add": (lambda t, v: ad.sum(ad.tanh(v[0] + v[1])), [(4, 3), (3,)]),
        "sub": (lambda t, v: ad.sum(ad.tanh(v[0] - v[1])), [(4, 3), (4, 3)]),
        "scale": (lambda t, v: ad.sum(ad.tanh(ad.scale(v[0], -1.7))), [(4, 3)]),
        "mul": (lambda t, v: ad.sum(ad.mul(v[0], v[1])), [(4, 3), (4, 1)]),
        "matmul": (lambda t, v: ad.sum(ad.tanh(v[0] @ v[1])), [(4, 3), (3, 2)]),
        "concat": (lambda t, v: ad.squared_norm(ad.tanh(ad.concat([v[0], v[1]]))), [(4, 3), (4, 2)]),
        "relu": (lambda t, v: ad.sum(ad.mul(ad.relu(v[0]), v[0])), [(4, 3)]),
        "tanh": (lambda t, v: ad.sum(ad.tanh(v[0])), [(4, 3)]),
        "softmax": (lambda t, v: ad.sum(ad.mul(ad.softmax(v[0]), v[1])), [(4, 3), (4, 3)]),
        "log": (lambda t, v: ad.sum(ad.log(ad.softmax(v[0]))), [(4, 3)]),
        "sum": (lambda t, v: ad.squared_norm(ad.sum(ad.tanh(v[0]), axis=0)), [(4, 3)]),
        "mean": (lambda t, v: ad.squared_norm(ad.mean(ad.tanh(v[0]), axis=1)), [(4, 3)]),
        "squared_norm": (lambda t, v: ad.squared_norm(v[0]), [(4, 3)]),
        "l1_norm": (lambda t, v: ad.l1_norm(v[0]), [(4, 3)]),
        "cross_entropy": (lambda t, v: ad.cross_entropy(v[0], y), [(4, 3)]),
    }


@pytest.mark.parametrize("op", sorted(_per_op_builders()))
def test_grad_check_every_op(op):
    f, shapes = _per_op_builders()[op]
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    params = [rng.normal(size=s) for s in shapes]
    rep = grad_check(f, params, step=1e-5, tol=1e-4)
    assert rep.passed, rep.failures
    assert rep.n_checked > 0


def test_quadratic_form_grad_check_is_tight():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 4))
    A = A @ A.T

    def f(t, v):
        x = v[0]
        return ad.sum(ad.mul(x @ t.const(A), x))

    rep = grad_check(f, [rng.normal(size=(1, 4))], step=1e-5)
    assert rep.max_rel_error < 1e-8


def test_two_layer_tanh_mlp_grad_check_100_params():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, 6)
    shapes = [(4, 12), (12,), (12, 3), (3,)]
    params = [rng.normal(scale=0.5, size=s) for s in shapes]
    assert sum(p.size for p in params) == 99

    def f(t, v):
        h = ad.tanh(t.const(x) @ v[0] + v[1])
        return ad.cross_entropy(h @ v[2] + v[3], y)

    rep = grad_check(f, params, step=1e-5, tol=1e-4)
    assert rep.passed
    assert rep.n_checked == sum(p.size for p in params)


def test_relu_kink_is_excluded():
    def f(t, v):
        return ad.sum(ad.relu(v[0]))

    rep = grad_check(f, [np.array([0.0, 1.0, -1.0])])
    assert (0, 0) in rep.excluded
    assert rep.n_checked == 2
    assert rep.passed


def test_grad_check_reports_wrong_gradient_without_raising():
    def bad_vjp_op(a):
        return ad._record("bad", (a,), lambda x: x * x, lambda g, out, x: (g * x,))

    rep = grad_check(lambda t, v: ad.sum(bad_vjp_op(v[0])), [np.array([1.0, 2.0])])
    assert not rep.passed
    assert len(rep.failures) == 2


def test_grad_check_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        grad_check(lambda t, v: ad.sum(v[0]), [np.ones(2)], step=0.0)


# ---------------------------------------------------------------- properties

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (4, 2), elements=finite),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_backward_is_linear(xv, wv, a, b):
    def grads(coef_f, coef_g):
        t = Tape()
        W = t.param(wv)
        h = t.const(xv) @ W
        f = ad.sum(ad.tanh(h))
        g = ad.squared_norm(h)
        return backward(t, ad.scale(f, coef_f) + ad.scale(g, coef_g))[0]

    combined = grads(a, b)
    separate = a * grads(1.0, 0.0) + b * grads(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (5, 3), elements=finite), st.integers(0, 2**32 - 1))
def test_identical_inputs_give_bit_identical_tapes(xv, seed):
    def run():
        rng = np.random.default_rng(seed)
        t = Tape()
        W = t.param(rng.normal(size=(3, 3)))
        out = ad.cross_entropy(ad.relu(t.const(xv) @ W), rng.integers(0, 3, 5))
        return t, backward(t, out)

    t1, g1 = run()
    t2, g2 = run()
    assert t1.ops == t2.ops and t1.parents == t2.parents
    assert all(np.array_equal(a, b) for a, b in zip(t1.values, t2.values))
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(xv):
    t = Tape()
    p = ad.softmax(t.const(xv)).value
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
