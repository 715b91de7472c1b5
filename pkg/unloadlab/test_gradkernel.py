import pytest
import numpy as np
from numpy import testing as nptest

import logbook

from unloadlab import gradkernel as gk
from unloadlab.errors import ShapeMismatch, NotScalar

@pytest.fixture()
def rng(request):
    return np.random.default_rng(42)

def _passes(fn, inputs, tol=1e-4):
    report = gk.gradcheck(fn, inputs, tol=tol)
    assert report.passed, repr(report)

def test_square_example():
    tape = gk.Tape()
    x = tape.leaf(np.array([3.]), name='x')
    grads = tape.backward(gk.sum(x*x))
    nptest.assert_allclose(x.grad, [6.])
    nptest.assert_allclose(grads['x'], [6.])

def test_backward_needs_scalar():
    tape = gk.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(NotScalar):
        tape.backward(x*2.)

def test_backward_on_foreign_tape():
    loss = gk.sum(gk.Tape().leaf(np.ones(2)))
    with pytest.raises(ValueError):
        gk.Tape().backward(loss)

def test_constants_get_no_gradient():
    tape = gk.Tape()
    x = tape.leaf(np.ones(3))
    c = tape.constant(np.arange(3.))
    out = x*c+np.ones(3)
    tape.backward(gk.sum(out))
    assert c.grad is None
    nptest.assert_allclose(x.grad, [0., 1., 2.])

def test_graph_without_leaves_records_nothing():
    tape = gk.Tape()
    out = tape.constant(np.ones(2))*3.
    assert not out.requires_grad and out.parents == () and out.backward_fn is None

def test_broadcast_gradients(rng):
    _passes(lambda a, b: gk.sum((a+b)*(a-b)), [rng.normal(size=(3, 1)), rng.normal(size=(4,))])
    _passes(lambda a, b: gk.sum(a*b/(b*b+1.)), [rng.normal(size=(2, 3)), rng.normal(size=(3,))])

def test_arithmetic_gradients(rng):
    _passes(lambda a, b: gk.sum(a/b), [rng.normal(size=(3, 2)), rng.uniform(1., 2., size=(3, 2))])
    _passes(lambda a: gk.sum(1.-a*-a), [rng.normal(size=(4,))])

def test_matmul_gradients(rng):
    _passes(lambda a, b: gk.sum(gk.exp(a @ b)*0.1), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

def test_activation_gradients(rng):
    x = rng.normal(size=(5, 3))
    _passes(lambda a: gk.sum(gk.relu(a)*a), [x])
    _passes(lambda a: gk.sum(gk.leaky_relu(a, 0.2)*a), [x])

def test_softmax(rng):
    x = rng.normal(size=(4, 3))
    tape = gk.Tape()
    out = gk.softmax(tape.leaf(x), axis=1)
    nptest.assert_allclose(out.values.sum(axis=1), 1.)
    w = rng.normal(size=(4, 3))
    _passes(lambda a: gk.sum(gk.softmax(a, axis=0)*w), [x])
    _passes(lambda a: gk.sum(gk.softmax(a, axis=-1)*w), [x])

def test_layer_norm(rng):
    x = rng.normal(size=(4, 6))
    tape = gk.Tape()
    out = gk.layer_norm(tape.leaf(x), np.ones(6), np.zeros(6))
    nptest.assert_allclose(out.values.mean(axis=1), 0., atol=1e-12)
    nptest.assert_allclose(out.values.std(axis=1), 1., atol=1e-4)
    w = rng.normal(size=(4, 6))
    _passes(lambda a, g, b: gk.sum(gk.layer_norm(a, g, b)*w),
            [x, rng.normal(size=6), rng.normal(size=6)])
    with pytest.raises(ShapeMismatch):
        gk.layer_norm(tape.leaf(x), np.ones(5), np.zeros(6))

def test_shape_ops(rng):
    w = rng.normal(size=(2, 6))
    _passes(lambda a, b: gk.sum(gk.reshape(gk.concat([a, b], axis=1), (2, 6))*w),
            [rng.normal(size=(3, 2)), rng.normal(size=(3, 2))])
    _passes(lambda a: gk.sum(gk.mean(a, axis=0)*w[0, :3]), [rng.normal(size=(4, 3))])
    _passes(lambda a: gk.sum(a[np.array([0, 2, 2, 1])]*w[0, :4, None]), [rng.normal(size=(3, 1))])

def test_segment_ops(rng):
    x = rng.normal(size=(6, 2))
    seg = np.array([0, 0, 1, 2, 2, 2])
    tape = gk.Tape()
    leaf = tape.leaf(x)
    nptest.assert_allclose(gk.segment_sum(leaf, seg, 4).values,
                           [x[:2].sum(0), x[2], x[3:].sum(0), [0., 0.]])
    nptest.assert_allclose(gk.segment_mean(leaf, seg, 4).values,
                           [x[:2].mean(0), x[2], x[3:].mean(0), [0., 0.]])
    nptest.assert_allclose(gk.segment_max(leaf, seg, 4).values,
                           [x[:2].max(0), x[2], x[3:].max(0), [0., 0.]])
    w = rng.normal(size=(3, 2))
    for op in (gk.segment_sum, gk.segment_mean, gk.segment_max):
        _passes(lambda a, op=op: gk.sum(op(a, seg, 3)*w), [x])

def test_segment_ids_checked():
    tape = gk.Tape()
    x = tape.leaf(np.ones((3, 2)))
    with pytest.raises(ShapeMismatch):
        gk.segment_sum(x, [0, 1], 2)
    with pytest.raises(ShapeMismatch):
        gk.segment_sum(x, [0, 1, 5], 2)

def test_shape_mismatch():
    tape = gk.Tape()
    with pytest.raises(ShapeMismatch):
        tape.leaf(np.ones((2, 3)))+tape.leaf(np.ones(4))
    with pytest.raises(ShapeMismatch):
        tape.leaf(np.ones((2, 3))) @ tape.leaf(np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        gk.reshape(tape.leaf(np.ones(5)), (2, 3))

def test_dropout(rng):
    tape = gk.Tape()
    x = tape.leaf(np.ones((200, 50)))
    assert gk.dropout(x, 0.5, rng, training=False) is x
    assert gk.dropout(x, 0., rng) is x
    out = gk.dropout(x, 0.5, rng)
    assert set(np.unique(out.values).tolist()) <= {0., 2.}
    nptest.assert_allclose(out.values.mean(), 1., atol=0.05)

def test_gradients_accumulate_over_uses():
    tape = gk.Tape()
    x = tape.leaf(np.array([2.]))
    tape.backward(gk.sum(x*3.+x*x))
    nptest.assert_allclose(x.grad, [7.])

def test_gradcheck_flags_wrong_gradient():
    def bad(a):
        wrong = gk._record(a.tape, a.values**2, (a,), lambda g: (g*a.values,))
        return gk.sum(wrong)
    with logbook.TestHandler() as handler:
        report = gk.gradcheck(bad, [np.array([1., 2.])], tol=1e-4)
    assert not report.passed
    assert any(r.message.startswith('gradcheck failed') for r in handler.records)
