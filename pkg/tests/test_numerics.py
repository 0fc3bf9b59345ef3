import zlib

import numpy as np
import pytest

from idfm import numerics as nx
from conftest import fd_check

T = nx.Tensor


def param(rng, *shape, scale=1.0):
    return T(rng.normal(0, scale, size=shape), requires_grad=True)


def test_matmul_examples():
    b = T([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(nx.matmul(T(np.eye(2)), b).data, b.data)
    assert np.array_equal(nx.matmul(T(np.zeros((2, 2))), b).data, np.zeros((2, 2)))
    out = nx.matmul(T([[1.0, 2.0], [3.0, 4.0]]), b).data
    assert np.array_equal(out, [[19, 22], [43, 50]])


def test_matmul_shape_error():
    with pytest.raises(nx.ShapeError):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_masked_softmax_diagonal_only():
    logits = T(np.random.default_rng(0).normal(size=(5, 5)))
    out = nx.masked_softmax(logits, np.eye(5, dtype=bool)).data
    assert np.array_equal(out, np.eye(5))


def test_masked_softmax_uniform():
    out = nx.masked_softmax(T(np.full((3, 4), 0.7))).data
    assert np.allclose(out, 0.25, rtol=0, atol=1e-15)


def test_masked_softmax_two_term():
    mask = np.array([[True, False, True]])
    out = nx.masked_softmax(T([[1.0, 2.0, 3.0]]), mask).data[0]
    s = 1 / (1 + np.exp(-2.0))
    assert out[1] == 0.0
    assert out[0] == pytest.approx(1 - s, abs=1e-12)
    assert out[2] == pytest.approx(s, abs=1e-12)
    assert out[0] == pytest.approx(0.119203, abs=1e-6)


def test_masked_softmax_degenerate_row():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(nx.DegenerateRowError):
        nx.masked_softmax(T(np.zeros((2, 2))), mask)


def test_backward_square_sum(rng):
    x = param(rng, 7)
    with nx.Tape():
        nx.backward(nx.sum_squares(x))
    assert np.allclose(x.grad, 2 * x.data, rtol=1e-15)


def test_backward_disconnected_param(rng):
    x, p = param(rng, 3, 2), param(rng, 2, 2)
    with nx.Tape():
        loss = nx.sum_all(x)
        nx.backward(loss)
    assert p.grad is None or not p.grad.any()


def test_backward_requires_scalar(rng):
    x = param(rng, 2, 2)
    with nx.Tape():
        y = nx.scale(x, 2.0)
        with pytest.raises(nx.ShapeError):
            nx.backward(y)


def test_backward_reused_node_accumulates(rng):
    x = param(rng, 4)
    with nx.Tape():
        y = nx.scale(x, 3.0)
        nx.backward(nx.sum_all(nx.mul(y, y)))
    assert np.allclose(x.grad, 18 * x.data, rtol=1e-14)


def test_nonfinite_forward_rejected():
    with np.errstate(over="ignore"), pytest.raises(nx.NonFiniteError):
        nx.scale(T([1e308]), 10.0)


def test_no_tape_no_recording(rng):
    x = param(rng, 2, 2)
    y = nx.scale(x, 2.0)
    assert not y.requires_grad


# -- finite differences on every primitive --------------------------------

def _ops(rng):
    m = lambda *s: param(rng, *s)
    mask = rng.random((5, 5)) < 0.6
    np.fill_diagonal(mask, True)
    w = rng.normal(size=(5, 5))
    wt = lambda t: T(w[: t.shape[0], : t.shape[1]])
    weighted = lambda t: nx.sum_all(nx.mul(t, wt(t)))
    return {
        "matmul": (lambda a, b: weighted(nx.matmul(a, b)), [m(3, 4), m(4, 5)]),
        "linear": (lambda x, W, b: weighted(nx.linear(x, W, b)), [m(4, 3), m(5, 3), m(5)]),
        "add": (lambda a, b: weighted(nx.add(a, b)), [m(3, 4), m(3, 4)]),
        "sub": (lambda a, b: weighted(nx.sub(a, b)), [m(3, 4), m(3, 4)]),
        "mul": (lambda a, b: weighted(nx.mul(a, b)), [m(3, 4), m(3, 4)]),
        "scale": (lambda a: weighted(nx.scale(a, -1.7)), [m(3, 4)]),
        "add_row": (lambda a, r: weighted(nx.add_row(a, r)), [m(4, 5), m(1, 5)]),
        "mul_row": (lambda a, r: weighted(nx.mul_row(a, r)), [m(4, 5), m(1, 5)]),
        "transpose": (lambda a: weighted(nx.transpose(a)), [m(3, 5)]),
        "reshape": (lambda a: weighted(nx.reshape(a, (5, 3))), [m(3, 5)]),
        "slice_rows": (lambda a: weighted(nx.slice_rows(a, 1, 4)), [m(5, 5)]),
        "slice_cols": (lambda a: weighted(nx.slice_cols(a, 2, 5)), [m(5, 5)]),
        "take_rows": (lambda a: weighted(nx.take_rows(a, [2, 0, 2, 1])), [m(3, 5)]),
        "concat_rows": (lambda a, b: weighted(nx.concat_rows([a, b])), [m(2, 5), m(3, 5)]),
        "concat_cols": (lambda a, b: weighted(nx.concat_cols([a, b])), [m(5, 2), m(5, 3)]),
        "layer_norm": (lambda a: weighted(nx.layer_norm(a)), [m(4, 5)]),
        "silu": (lambda a: weighted(nx.silu(a)), [m(4, 5)]),
        "gelu": (lambda a: weighted(nx.gelu(a)), [m(4, 5)]),
        "masked_softmax": (lambda a: weighted(nx.masked_softmax(a, mask)), [m(5, 5)]),
        "softmax_unmasked": (lambda a: weighted(nx.masked_softmax(a)), [m(5, 5)]),
        "sum_all": (lambda a: nx.sum_all(a), [m(3, 3)]),
        "mean_all": (lambda a: nx.mean_all(nx.mul(a, a)), [m(3, 3)]),
        "sum_squares": (lambda a: nx.sum_squares(a), [m(3, 3)]),
    }


PRIMITIVES = sorted(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, inputs = _ops(rng)[name]
    assert fd_check(fn, inputs, rng, points=20) < 1e-6


def test_masked_softmax_blocked_logits_get_zero_grad(rng):
    mask = np.array([[True, False, True], [False, True, True], [True, True, True]])
    x = param(rng, 3, 3)
    w = T(rng.normal(size=(3, 3)))
    with nx.Tape():
        nx.backward(nx.sum_all(nx.mul(nx.masked_softmax(x, mask), w)))
    assert np.all(x.grad[~mask] == 0.0)


# -- Adam -------------------------------------------------------------------

def test_adam_zero_grad_no_change(rng):
    p = {"w": rng.normal(size=(3, 2))}
    before = p["w"].copy()
    st = nx.AdamState()
    nx.adam_step(p, {"w": np.zeros((3, 2))}, st)
    assert np.array_equal(p["w"], before)
    assert st.step_count == 1
    assert st.first_moment["w"].shape == (3, 2)


def test_adam_first_step_formula():
    p = {"w": np.array([0.5, -2.0])}
    st = nx.AdamState(lr=1e-3)
    nx.adam_step(p, {"w": np.ones(2)}, st)
    # m_hat = v_hat = 1 after bias correction
    expected = np.array([0.5, -2.0]) - 1e-3 * 1.0 / (1.0 + 1e-8)
    assert np.allclose(p["w"], expected, rtol=0, atol=1e-15)


def test_adam_step_count_increments(rng):
    p = {"w": rng.normal(size=4)}
    st = nx.AdamState()
    for k in range(1, 4):
        nx.adam_step(p, {"w": rng.normal(size=4)}, st)
        assert st.step_count == k


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = T(rng.normal(size=(4, 3)), requires_grad=True)
        opt = nx.Adam({"w": w}, lr=1e-2)
        for _ in range(10):
            opt.zero_grad()
            with nx.Tape():
                nx.backward(nx.sum_squares(nx.matmul(w, T(rng.normal(size=(3, 2))))))
            opt.step()
        return w.data

    assert np.array_equal(run(), run())
