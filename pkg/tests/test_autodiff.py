import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionlab.autodiff import OPS, Graph, NumericalError, ProtocolError, ShapeError, log_softmax
from lesionlab.oracle import check_all_ops, grad_check

finite = st.floats(-3, 3, allow_nan=False)


def test_every_op_is_registered():
    expected = {"affine", "matmul", "transpose", "add", "mul", "scale", "silu", "softmax", "layernorm",
                "embedding", "cross_entropy", "sum", "mean_rows", "normalize_rows", "concat_rows",
                "concat_cols", "slice_cols", "mask_cols"}
    assert set(OPS) == expected


def test_affine_forward_and_grad():
    g = Graph()
    x = g.param(np.array([[1.0, 2.0]]))
    w = g.param(np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]))
    b = g.param(np.array([0.5, 0.0, 0.0]))
    y = g.affine(x, w, b)
    np.testing.assert_array_equal(y.data, [[5.5, 2.0, 0.0]])
    g.backward(g.sum(y))
    np.testing.assert_array_equal(x.grad, [[0.0, 3.5]])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0, 1.0])


def test_shape_errors_name_the_op():
    g = Graph()
    with pytest.raises(ShapeError, match="affine"):
        g.affine(g.tensor(np.ones((2, 3))), g.tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        g.add(g.tensor(np.ones((2, 3))), g.tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError, match="embedding"):
        g.embedding(g.tensor(np.ones((4, 2))), [4])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_raises():
    g = Graph()
    x = g.tensor(np.array([[1e308, 1e308]]))
    with pytest.raises(NumericalError):
        g.scale(x, 10.0)
    with pytest.raises(NumericalError):
        g.tensor(np.array([np.nan]))


def test_backward_protocol_errors():
    g = Graph(record=False)
    x = g.tensor(np.ones((2, 2)))
    with pytest.raises(ProtocolError):
        g.backward(g.sum(x))
    g1, g2 = Graph(), Graph()
    loss = g1.sum(g1.param(np.ones((2, 2))))
    with pytest.raises(ProtocolError):
        g2.backward(loss)
    with pytest.raises(ProtocolError):
        g1.backward(g1.param(np.ones((2, 2))))
    a, b = g1.tensor(np.ones((1, 1))), g2.tensor(np.ones((1, 1)))
    with pytest.raises(ProtocolError):
        g1.add(a, b)


def test_fan_out_accumulates_and_unreached_get_zero():
    g = Graph()
    x = g.param(np.array([[2.0, -1.0]]))
    unused = g.param(np.ones(3))
    y = g.add(g.mul(x, x), x)  # x^2 + x
    g.backward(g.sum(y))
    np.testing.assert_allclose(x.grad, [[5.0, -1.0]])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_softmax_masked_entries_are_zero():
    g = Graph()
    allowed = np.tril(np.ones((3, 3), dtype=bool))
    p = g.softmax(g.tensor(np.zeros((3, 3))), allowed).data
    np.testing.assert_allclose(p, [[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]])


def test_cross_entropy_weights():
    g = Graph()
    logits = g.tensor(np.log(np.array([[0.5, 0.5], [0.9, 0.1]])))
    ce = g.cross_entropy(logits, [0, 0], np.array([0.0, 1.0]))
    assert ce.data.shape == ()
    assert ce.data == pytest.approx(-np.log(0.9))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_log_softmax_normalised(x):
    lp = log_softmax(x)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(lp <= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4), elements=finite), arrays(np.float64, (4, 3), elements=finite))
def test_linear_graph_gradient_is_exact(x, w):
    # d sum(x @ w) / dx = row sums of w, for any x
    g = Graph()
    xt = g.param(x)
    g.backward(g.sum(g.matmul(xt, g.tensor(w))))
    np.testing.assert_allclose(xt.grad, np.tile(w.sum(axis=1), (2, 1)), rtol=1e-14, atol=1e-14)


def test_grad_check_linear_graph_near_machine_precision():
    rng = np.random.default_rng(1)
    g = Graph()
    g.sum(g.affine(g.param(rng.standard_normal((3, 4))), g.param(rng.standard_normal((4, 2)))))
    rep = grad_check(g)
    assert rep.ok
    assert rep.errors["affine"] < 1e-8


def test_grad_check_silu_chain():
    rng = np.random.default_rng(2)
    g = Graph()
    x = g.param(rng.uniform(-4, 4, size=(5, 6)))
    g.sum(g.silu(g.silu(g.silu(x))))
    rep = grad_check(g)
    assert rep.errors["silu"] < 1e-4


def test_corrupted_backward_rule_is_caught(monkeypatch):
    op = OPS["silu"]
    orig = op.backward
    monkeypatch.setattr(op, "backward", lambda g, out, arrays: tuple(1.01 * a for a in orig(g, out, arrays)))
    rep = check_all_ops(n_instances=3)
    assert rep.failed == ["silu"]


def test_end_to_end_graph_gradient_matches_finite_differences(untrained_small):
    # whole-model check of the tape walk (accumulation across ops), on a few weights
    from lesionlab.model import caption_loss_and_grads
    from lesionlab.data import gen_dataset

    model = untrained_small.copy()
    samples = gen_dataset(1, seed=5)[:2]
    _, grads = caption_loss_and_grads(model, samples)
    rng = np.random.default_rng(0)
    h = 1e-5
    for name in ("lm.0.gate", "lm.1.down", "proj.fc1.w", "vis.0.attn.wq", "lm.tok"):
        w = model.weights[name]
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in w.shape)
            orig = w[idx]
            w[idx] = orig + h
            fp, _ = caption_loss_and_grads(model, samples)
            w[idx] = orig - h
            fm, _ = caption_loss_and_grads(model, samples)
            w[idx] = orig
            num = (fp - fm) / (2 * h)
            assert abs(num - grads[name][idx]) <= 1e-6 * max(1.0, abs(num)), name
