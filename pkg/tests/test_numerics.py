import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refine import numerics as nx
from refine.numerics import Array, Tape


def tracked(x):
    return Array(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_softmax_of_equal_logits_is_uniform():
    assert np.allclose(nx.softmax(Array([0.0, 0.0])).data, [0.5, 0.5])


def test_matmul_identity():
    m = Array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(Array(np.eye(2)), m).data, m.data)


def test_log_softmax_oracle():
    out = nx.log_softmax(Array([1.0, 2.0])).data
    x = np.array([1.0, 2.0])
    assert np.allclose(out, x - np.log(np.exp(x).sum()), atol=1e-6)
    assert np.allclose(out, [-1.3133, -0.3133], atol=1e-4)


def test_shape_mismatch_names_primitive_and_shapes():
    with pytest.raises(nx.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nx.matmul(Array(np.ones((2, 3))), Array(np.ones((2, 3))))


def test_construction_rejects_non_finite():
    with pytest.raises(ValueError):
        Array([1.0, np.nan])
    with pytest.raises(ValueError):
        Array([np.inf])


def test_arrays_are_read_only():
    a = Array([1.0, 2.0])
    with pytest.raises(ValueError):
        a.data[0] = 5.0


def test_default_storage_is_float32():
    assert Array([1.0]).data.dtype == np.float32
    with nx.precision(np.float64):
        assert Array([1.0]).data.dtype == np.float64


def test_backward_of_sum_is_ones():
    with nx.precision(np.float64):
        p = tracked(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = nx.sum(p)
        g = tape.backward(loss)
    assert np.array_equal(g[p], np.ones((2, 3)))


def test_backward_of_half_squared_norm_is_identity():
    with nx.precision(np.float64):
        p = tracked([0.3, -1.2, 2.0])
        with Tape() as tape:
            loss = nx.scale(nx.sum(nx.mul(p, p)), 0.5)
        g = tape.backward(loss)
    assert np.allclose(g[p], p.data)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    with nx.precision(np.float64):
        logits = tracked([[0.2, -0.5, 1.1]])
        with Tape() as tape:
            loss = nx.cross_entropy(logits, [1])
        g = tape.backward(loss)[logits][0]
        err = nx.finite_diff_check(lambda a: nx.cross_entropy(a, [1]), Array(logits.data), 1e-3)
    z = logits.data[0]
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    assert np.allclose(g, p - np.eye(3)[1], atol=1e-9)
    assert err < 1e-4


def test_backward_rejects_non_scalar_loss():
    p = tracked([1.0, 2.0])
    with Tape() as tape:
        y = nx.scale(p, 2.0)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_untouched_leaf_gets_zero_gradient():
    with nx.precision(np.float64):
        a, b = tracked([1.0, 2.0]), tracked([3.0])
        with Tape() as tape:
            loss = nx.sum(a)
        g = tape.backward(loss, wrt=[a, b])
    assert np.array_equal(g[b], [0.0])


def test_constants_are_not_recorded():
    c = Array([1.0, 2.0])
    with Tape() as tape:
        nx.sum(nx.mul(c, c))
    assert len(tape) == 0


def test_finite_diff_check_half_norm_and_constant():
    with nx.precision(np.float64):
        p = Array(np.random.default_rng(0).uniform(-1, 1, 7))
        assert nx.finite_diff_check(lambda a: nx.scale(nx.sum(nx.mul(a, a)), 0.5), p, 1e-3) < 1e-4
        err = nx.finite_diff_check(lambda a: nx.scale(nx.sum(a), 0.0), p, 1e-3)
    assert err < 1e-4


def test_finite_diff_check_rejects_non_finite_and_bad_step():
    p = Array([1.0])
    with pytest.raises(ValueError):
        nx.finite_diff_check(lambda a: nx.log_softmax(a), p, 0.0)

    def blow_up(a):
        return nx.sum(nx.exp(nx.scale(a, 1e6)))

    with np.errstate(over="ignore"), pytest.raises(ValueError):
        nx.finite_diff_check(blow_up, p, 1e-3)


def test_backward_is_bitwise_repeatable():
    def grads():
        x = np.random.default_rng(5).uniform(-1, 1, (4, 6))
        w = Array(np.random.default_rng(6).uniform(-1, 1, (6, 3)), requires_grad=True)
        with Tape() as tape:
            loss = nx.cross_entropy(nx.matmul(Array(x), w), [0, 1, 2, 0])
        return tape.backward(loss)[w]

    assert np.array_equal(grads(), grads())


# per-primitive gradient checks on random inputs in [-1, 1]
_rng = np.random.default_rng(7)


def _u(*shape):
    return _rng.uniform(-1, 1, shape)


LINEAR = {
    "matmul": (lambda d: nx.sum(nx.mul(nx.matmul(d["a"], d["b"]), d["w"])),
               {"a": _u(3, 4), "b": _u(4, 2), "w": _u(3, 2)}),
    "add": (lambda d: nx.sum(nx.mul(nx.add(d["a"], d["b"]), d["w"])),
            {"a": _u(3, 4), "b": _u(4), "w": _u(3, 4)}),
    "sub": (lambda d: nx.sum(nx.mul(nx.sub(d["a"], d["b"]), d["w"])),
            {"a": _u(2, 3), "b": _u(2, 3), "w": _u(2, 3)}),
    "scale": (lambda d: nx.sum(nx.mul(nx.scale(d["a"], -1.7), d["w"])), {"a": _u(5), "w": _u(5)}),
    "slice_concat": (lambda d: nx.sum(nx.mul(nx.concat_rows([nx.slice_rows(d["a"], 1, 3), d["a"]]),
                                              d["w"])),
                     {"a": _u(4, 2), "w": _u(6, 2)}),
    "gather_pick": (lambda d: nx.sum(nx.pick(nx.gather_rows(d["a"], [2, 0, 2]), [1, 0, 1])),
                    {"a": _u(3, 2)}),
    "mean": (lambda d: nx.mean(nx.mul(d["a"], d["w"])), {"a": _u(3, 3), "w": _u(3, 3)}),
    "reshape": (lambda d: nx.sum(nx.mul(nx.reshape(d["a"], (6,)), d["w"])), {"a": _u(2, 3), "w": _u(6)}),
}

NONLINEAR = {
    "mul": (lambda d: nx.sum(nx.mul(d["a"], d["b"])), {"a": _u(3, 2), "b": _u(3, 2)}),
    "exp": (lambda d: nx.sum(nx.mul(nx.exp(d["a"]), d["w"])), {"a": _u(4), "w": _u(4)}),
    "silu": (lambda d: nx.sum(nx.mul(nx.silu(d["a"]), d["w"])), {"a": _u(3, 3), "w": _u(3, 3)}),
    "softmax": (lambda d: nx.sum(nx.mul(nx.softmax(d["a"]), d["w"])), {"a": _u(2, 5), "w": _u(2, 5)}),
    "log_softmax": (lambda d: nx.sum(nx.mul(nx.log_softmax(d["a"]), d["w"])),
                    {"a": _u(2, 5), "w": _u(2, 5)}),
    "l2_norm": (lambda d: nx.sum(nx.l2_norm(d["a"])), {"a": _u(3, 4)}),
    "l2_normalize": (lambda d: nx.sum(nx.mul(nx.l2_normalize(d["a"]), d["w"])),
                     {"a": _u(3, 4), "w": _u(3, 4)}),
    "rms_norm": (lambda d: nx.sum(nx.mul(nx.rms_norm(d["a"], d["g"]), d["w"])),
                 {"a": _u(3, 4), "g": _u(4), "w": _u(3, 4)}),
    "cross_entropy": (lambda d: nx.cross_entropy(d["a"], [0, 3]), {"a": _u(2, 4)}),
}


@pytest.mark.parametrize("name", sorted(LINEAR))
def test_linear_primitive_gradients(name):
    f, raw = LINEAR[name]
    with nx.precision(np.float64):
        err = nx.finite_diff_check(f, {k: Array(v) for k, v in raw.items()}, 1e-3)
    assert err < 1e-4


@pytest.mark.parametrize("name", sorted(NONLINEAR))
def test_nonlinear_primitive_gradients(name):
    f, raw = NONLINEAR[name]
    with nx.precision(np.float64):
        err = nx.finite_diff_check(f, {k: Array(v) for k, v in raw.items()}, 1e-3)
    assert err < 1e-2


def test_clip_and_minimum_gradients_route_to_the_active_branch():
    with nx.precision(np.float64):
        a, b = tracked([0.5, 2.0, -3.0]), tracked([1.0, 1.0, 1.0])
        with Tape() as tape:
            loss = nx.sum(nx.add(nx.clip(a, -1.0, 1.0), nx.minimum(a, b)))
        g = tape.backward(loss, wrt=[a, b])
    assert np.array_equal(g[a], [2.0, 0.0, 1.0])
    assert np.array_equal(g[b], [0.0, 1.0, 0.0])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                     elements=st.floats(-50, 50))


@given(finite_rows, st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = nx.softmax(Array(x)).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    shifted = nx.softmax(Array(x + c)).data
    assert np.allclose(p, shifted, atol=1e-6)


@given(finite_rows)
def test_log_softmax_is_log_of_softmax(x):
    ls = nx.log_softmax(Array(x)).data.astype(np.float64)
    assert np.all(ls <= 1e-6)
    assert np.allclose(np.exp(ls).sum(axis=-1), 1.0, atol=1e-5)
