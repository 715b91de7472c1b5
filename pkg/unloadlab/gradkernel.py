"""
Small reverse-mode differentiation engine on numpy arrays.

Operations are recorded on a Tape in creation order; backward walks the
records in reverse, which is a reverse topological order because every
record is created after its inputs. Values are float64 throughout.

    tape = Tape()
    x = tape.leaf(np.array([3.]))
    loss = gk.sum(x*x)
    tape.backward(loss)
    x.grad  # array([6.])
"""
import numpy as np

from logbook import Logger
log = Logger('unloadlab.gradkernel')

from unloadlab.errors import ShapeMismatch, NotScalar

LAYER_NORM_EPS = 1e-5

class DiffArray(object):
    """Array value plus its position on a tape"""
    def __init__(self, tape, values, requires_grad=False, parents=(), backward_fn=None,
                 name=None):
        self.tape = tape
        self.values = values
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.grad = None
        self.id = tape._register(self)

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def numpy(self):
        return self.values

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)

    def __repr__(self):
        return 'DiffArray(id={}, shape={}, requires_grad={})'.format(
            self.id, self.shape, self.requires_grad)

class Tape(object):
    """Ordered record of every DiffArray created during one forward pass"""
    def __init__(self):
        self.nodes = []

    def _register(self, node):
        self.nodes.append(node)
        return len(self.nodes)-1

    def leaf(self, values, requires_grad=True, name=None):
        return DiffArray(self, np.array(values, dtype=np.float64), requires_grad,
                         name=name)

    def constant(self, values):
        return DiffArray(self, np.asarray(values, dtype=np.float64), False)

    def backward(self, loss):
        """
        Accumulate d(loss)/d(leaf) into .grad of every leaf that requires it

        RETURNS
        -------
            dict mapping leaf name (or id) to its gradient
        """
        if loss.tape is not self:
            raise ValueError('Loss was recorded on a different tape')
        if loss.values.size != 1:
            raise NotScalar('backward needs a scalar loss, got shape {}'.format(loss.shape))
        grads = {loss.id: np.ones_like(loss.values)}
        for node in reversed(self.nodes[:loss.id+1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad+g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id]+pg
                else:
                    grads[parent.id] = pg
        return {(n.name if n.name is not None else n.id): n.grad
                for n in self.nodes if n.backward_fn is None and n.requires_grad
                and n.grad is not None}

def backward(loss):
    return loss.tape.backward(loss)

def _lift(x, tape):
    if isinstance(x, DiffArray):
        return x
    return tape.constant(x)

def _tape_of(*args):
    for a in args:
        if isinstance(a, DiffArray):
            return a.tape
    raise ValueError('At least one operand must be a DiffArray')

def _record(tape, values, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    return DiffArray(tape, values, needs, parents if needs else (),
                     backward_fn if needs else None)

def unbroadcast(grad, shape):
    """Sum a broadcast gradient back to the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch('{}: shapes {} and {} do not broadcast'.format(op, a.shape, b.shape))

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, 'add')
    return _record(tape, a.values+b.values, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))

def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, 'sub')
    return _record(tape, a.values-b.values, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))

def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, 'mul')
    return _record(tape, a.values*b.values, (a, b),
                   lambda g: (unbroadcast(g*b.values, a.shape),
                              unbroadcast(g*a.values, b.shape)))

def div(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a, b, 'div')
    out = a.values/b.values
    return _record(tape, out, (a, b),
                   lambda g: (unbroadcast(g/b.values, a.shape),
                              unbroadcast(-g*out/b.values, b.shape)))

def matmul(a, b):
    """2-D matrix product"""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch('matmul: cannot multiply {} by {}'.format(a.shape, b.shape))
    return _record(tape, a.values.dot(b.values), (a, b),
                   lambda g: (g.dot(b.values.T), a.values.T.dot(g)))

def relu(x):
    mask = x.values > 0.
    return _record(x.tape, np.where(mask, x.values, 0.), (x,), lambda g: (g*mask,))

def leaky_relu(x, slope=0.2):
    factor = np.where(x.values > 0., 1., slope)
    return _record(x.tape, x.values*factor, (x,), lambda g: (g*factor,))

def exp(x):
    out = np.exp(x.values)
    return _record(x.tape, out, (x,), lambda g: (g*out,))

def softmax(x, axis=-1):
    shifted = x.values-x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e/e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out*(g-np.sum(g*out, axis=axis, keepdims=True)),)
    return _record(x.tape, out, (x,), grad_fn)

def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis, then scale by gain and shift by bias"""
    tape = _tape_of(x, gain, bias)
    gain, bias = _lift(gain, tape), _lift(bias, tape)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch('layer_norm: gain {} and bias {} must match last axis {}'.format(
            gain.shape, bias.shape, x.shape[-1]))
    mu = x.values.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.values.var(axis=-1, keepdims=True)+eps)
    xhat = (x.values-mu)/sigma
    out = xhat*gain.values+bias.values

    def grad_fn(g):
        lead = tuple(range(g.ndim-1))
        dxhat = g*gain.values
        dx = (dxhat-dxhat.mean(axis=-1, keepdims=True)
              -xhat*np.mean(dxhat*xhat, axis=-1, keepdims=True))/sigma
        return dx, np.sum(g*xhat, axis=lead), np.sum(g, axis=lead)
    return _record(tape, out, (x, gain, bias), grad_fn)

def dropout(x, drop_prob, rng, training=True):
    """Inverted dropout; identity when not training or drop_prob is 0"""
    if not training or drop_prob == 0.:
        return x
    keep = 1.-drop_prob
    mask = (rng.random(x.shape) < keep)/keep
    return _record(x.tape, x.values*mask, (x,), lambda g: (g*mask,))

def concat(arrays, axis=-1):
    tape = _tape_of(*arrays)
    arrays = [_lift(a, tape) for a in arrays]
    try:
        out = np.concatenate([a.values for a in arrays], axis=axis)
    except ValueError as err:
        raise ShapeMismatch('concat: {}'.format(err))
    splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return _record(tape, out, tuple(arrays), lambda g: tuple(np.split(g, splits, axis=axis)))

def reshape(x, shape):
    try:
        out = x.values.reshape(shape)
    except ValueError as err:
        raise ShapeMismatch('reshape: {}'.format(err))
    return _record(x.tape, out, (x,), lambda g: (g.reshape(x.shape),))

def sum(x, axis=None, keepdims=False):
    out = np.sum(x.values, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _record(x.tape, np.asarray(out), (x,), grad_fn)

def mean(x, axis=None, keepdims=False):
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1./count)

def gather(x, idx):
    """Rows x[idx] along the first axis"""
    idx = np.asarray(idx)

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)
    return _record(x.tape, x.values[idx], (x,), grad_fn)

def _check_segments(x, segments, n_segments):
    segments = np.asarray(segments)
    if segments.shape != (x.shape[0],):
        raise ShapeMismatch('segment ids shape {} does not match {} rows'.format(
            segments.shape, x.shape[0]))
    if segments.size and (segments.min() < 0 or segments.max() >= n_segments):
        raise ShapeMismatch('segment ids outside [0, {})'.format(n_segments))
    return segments

def segment_sum(x, segments, n_segments):
    """out[s] = sum of rows of x whose segment id is s"""
    segments = _check_segments(x, segments, n_segments)
    out = np.zeros((n_segments,)+x.shape[1:])
    np.add.at(out, segments, x.values)
    return _record(x.tape, out, (x,), lambda g: (g[segments],))

def segment_mean(x, segments, n_segments):
    segments = _check_segments(x, segments, n_segments)
    counts = np.maximum(np.bincount(segments, minlength=n_segments), 1).astype(np.float64)
    counts = counts.reshape((n_segments,)+(1,)*(x.ndim-1))
    return mul(segment_sum(x, segments, n_segments), 1./counts)

def segment_max(x, segments, n_segments):
    """Row-wise maximum per segment (0 for empty segments); ties go to the first row"""
    segments = _check_segments(x, segments, n_segments)
    out = np.full((n_segments,)+x.shape[1:], -np.inf)
    np.maximum.at(out, segments, x.values)
    rows = np.arange(x.shape[0]).reshape((-1,)+(1,)*(x.ndim-1))
    is_max = x.values == out[segments]
    first = np.full(out.shape, x.shape[0])
    np.minimum.at(first, segments, np.where(is_max, rows, x.shape[0]))
    empty = ~np.isfinite(out)
    out[empty] = 0.

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        chosen = np.broadcast_to(rows, x.shape) == first[segments]
        gx[chosen] = g[segments][chosen]
        return (gx,)
    return _record(x.tape, out, (x,), grad_fn)

class GradcheckReport(object):
    def __init__(self, max_rel_error, n_checked, worst, tol):
        self.max_rel_error = float(max_rel_error)
        self.n_checked = int(n_checked)
        self.worst = worst
        self.tol = tol

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def __repr__(self):
        return 'GradcheckReport(max_rel_error={:.3e}, n_checked={}, worst={}, passed={})'.format(
            self.max_rel_error, self.n_checked, self.worst, self.passed)

def gradcheck(fn, inputs, tol=1e-4, step=1e-5, n_coords=None, seed=0, floor=1e-6):
    """
    Compare backward against central differences

    fn receives one DiffArray leaf per input array (all on one fresh tape)
    and returns a scalar DiffArray. It is re-run for every perturbation,
    so any randomness inside it must be reseeded per call.

    INPUTS
    ------
        inputs - list of np.ndarray
        n_coords - coordinates checked per input (all when None)
        floor - lower bound of the relative error denominator

    RETURNS
    -------
        GradcheckReport
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    leaves = [tape.leaf(x) for x in inputs]
    tape.backward(fn(*leaves))
    analytic = [np.zeros_like(x) if leaf.grad is None else leaf.grad
                for x, leaf in zip(inputs, leaves)]

    def value(arrays):
        t = Tape()
        return float(fn(*[t.leaf(a, requires_grad=False) for a in arrays]).values.reshape(-1)[0])

    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0., None, 0
    for k, x in enumerate(inputs):
        coords = np.arange(x.size)
        if n_coords is not None and n_coords < x.size:
            coords = rng.choice(x.size, size=n_coords, replace=False)
        for c in coords:
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[k].flat[c] += step
            minus[k].flat[c] -= step
            numeric = (value(plus)-value(minus))/(2.*step)
            a = analytic[k].flat[c]
            rel = abs(a-numeric)/max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (k, int(c))
    report = GradcheckReport(worst, checked, worst_at, tol)
    if report.passed:
        log.debug('gradcheck passed: {}'.format(report))
    else:
        log.warning('gradcheck failed: {}'.format(report))
    return report
