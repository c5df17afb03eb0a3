"""Dense float64 tensors with tape-based reverse-mode differentiation.

Feature maps are rank 4 in (N, C, H, W) order. Parameters (kernels, norm
affines, ensemble logits) reuse the same type with their own rank.

Ops are plain functions. Outside a ``Graph`` they only compute; inside
``with Graph() as g:`` every op whose inputs are tracked appends a node to the
tape, and ``g.backward(loss)`` walks the tape in reverse.
"""
import contextvars
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import xlogy

from Errors import ConfigError, DimensionError, GraphError, IndexRangeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
AXES = ('N', 'C', 'H', 'W')
LOG_FLOOR = 1e-300

_ACTIVE_GRAPH = contextvars.ContextVar('asymfusion_graph', default=None)


class Tensor:
    __slots__ = ('data', 'requires_grad', 'name')

    def __init__(self, data, requires_grad=False, name=None):
        array = np.array(data, dtype=DTYPE)
        for axis, size in enumerate(array.shape):
            if size < 1:
                raise DimensionError(_axis_name(array.ndim, axis), '>= 1', size, 'Tensor')
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array, name=None):
        # Internal constructor for freshly computed arrays; skips the copy.
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=DTYPE)
        array.setflags(write=False)
        tensor.data = array
        tensor.requires_grad = False
        tensor.name = name
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def N(self):
        return self._dim(0)

    @property
    def C(self):
        return self._dim(1)

    @property
    def H(self):
        return self._dim(2)

    @property
    def W(self):
        return self._dim(3)

    def _dim(self, axis):
        require_rank4(self, 'Tensor')
        return self.data.shape[axis]

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label})"


def _axis_name(ndim, axis):
    return AXES[axis] if ndim == 4 else str(axis)


def require_rank4(x, where):
    if x.ndim != 4:
        raise DimensionError('rank', 4, x.ndim, where)


def require_same_shape(a, b, where):
    if a.ndim != b.ndim:
        raise DimensionError('rank', a.ndim, b.ndim, where)
    for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
        if sa != sb:
            raise DimensionError(_axis_name(a.ndim, axis), sa, sb, where)


class Node:
    __slots__ = ('op', 'inputs', 'output', 'backward')

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Gradients:
    """Gradient lookup keyed by tensor identity. Unreached tensors map to zeros."""

    def __init__(self, grads, keep):
        self._grads = grads
        self._keep = keep

    def __getitem__(self, tensor):
        grad = self._grads.get(id(tensor))
        if grad is None or self._keep.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape, dtype=DTYPE)
        return grad

    def __contains__(self, tensor):
        return self._keep.get(id(tensor)) is tensor and id(tensor) in self._grads


class Graph:
    """Ordered tape of recorded ops. Single-threaded per instance."""

    def __init__(self):
        self.nodes = []
        self._tracked = {}
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None
        return False

    def is_tracked(self, tensor):
        return tensor.requires_grad or self._tracked.get(id(tensor)) is tensor

    def record(self, op, inputs, output, backward):
        self.nodes.append(Node(op, inputs, output, backward))
        self._tracked[id(output)] = output

    def backward(self, loss):
        if loss.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones((), dtype=DTYPE)}
        keep = {id(loss): loss}
        for node in reversed(self.nodes):
            upstream = grads.get(id(node.output))
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not self.is_tracked(tensor):
                    continue
                key = id(tensor)
                keep[key] = tensor
                # Accumulation order is the fixed reverse tape order.
                grads[key] = grads[key] + grad if key in grads else grad
        return Gradients(grads, keep)


def record_op(op, inputs, data, backward):
    """Wrap ``data`` as the op result and put it on the active tape if needed."""
    out = Tensor._wrap(data)
    graph = _ACTIVE_GRAPH.get()
    if graph is not None and any(graph.is_tracked(t) for t in inputs):
        graph.record(op, tuple(inputs), out, backward)
    return out


def backward(graph, loss):
    return graph.backward(loss)


def stop_gradient(x):
    return Tensor._wrap(x.data)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation with zero padding: out[n,o] = sum_c w[o,c] * x[n,c] + b[o]."""
    require_rank4(x, 'conv2d')
    if w.ndim != 4:
        raise DimensionError('weight rank', 4, w.ndim, 'conv2d')
    cout, cin, k, k2 = w.shape
    if x.C != cin:
        raise DimensionError('C', cin, x.C, 'conv2d')
    if k != k2 or k not in (1, 3):
        raise DimensionError('kernel', '1x1 or 3x3', f"{k}x{k2}", 'conv2d')
    if stride not in (1, 2):
        raise ConfigError(f"conv2d: stride must be 1 or 2, got {stride}")
    if pad not in (0, (k - 1) // 2):
        raise ConfigError(f"conv2d: pad must be 0 or {(k - 1) // 2} for a {k}x{k} kernel, got {pad}")
    if b is not None and b.shape != (cout,):
        raise DimensionError('bias', (cout,), b.shape, 'conv2d')

    n, _, h, wd = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1:
        raise DimensionError('H', f">= {k - 2 * pad}", h, 'conv2d')
    if wo < 1:
        raise DimensionError('W', f">= {k - 2 * pad}", wd, 'conv2d')

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (N, C, Ho, Wo, k, k) view of every receptive field
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(grad):
        gw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(grad, w.data, axes=([1], [0]))
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, grad.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return record_op('conv2d', inputs, out, backward_fn)


def relu(x):
    mask = x.data > 0
    return record_op('relu', (x,), np.maximum(x.data, 0.0), lambda g: (g * mask,))


def add(x, y):
    require_same_shape(x, y, 'add')
    return record_op('add', (x, y), x.data + y.data, lambda g: (g, g))


def scale(x, c):
    c = float(c)
    return record_op('scale', (x,), x.data * c, lambda g: (g * c,))


def mul(x, y):
    require_same_shape(x, y, 'mul')
    return record_op('mul', (x, y), x.data * y.data, lambda g: (g * y.data, g * x.data))


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record_op('sigmoid', (x,), s, lambda g: (g * s * (1.0 - s),))


def sum_scalars(*terms):
    for term in terms:
        if term.ndim != 0:
            raise DimensionError('rank', 0, term.ndim, 'sum_scalars')
    total = np.sum([t.data for t in terms])
    return record_op('sum_scalars', terms, total, lambda g: tuple(g for _ in terms))


def weighted_sum(x, r):
    """Scalar projection sum(r * x) with a constant weight array ``r``."""
    r = np.asarray(r, dtype=DTYPE)
    if r.shape != x.shape:
        raise DimensionError('shape', x.shape, r.shape, 'weighted_sum')
    return record_op('weighted_sum', (x,), np.sum(r * x.data), lambda g: (g * r,))


def channel_concat(x1, x2):
    """x1's channels followed by x2's."""
    require_rank4(x1, 'channel_concat')
    require_rank4(x2, 'channel_concat')
    for axis in (0, 2, 3):
        if x1.shape[axis] != x2.shape[axis]:
            raise DimensionError(AXES[axis], x1.shape[axis], x2.shape[axis], 'channel_concat')
    c1 = x1.C
    out = np.concatenate([x1.data, x2.data], axis=1)
    return record_op('channel_concat', (x1, x2), out, lambda g: (g[:, :c1], g[:, c1:]))


def channel_slice(x, lo, hi):
    """Channels lo..hi, 1-based and inclusive."""
    require_rank4(x, 'channel_slice')
    if not 1 <= lo <= hi <= x.C:
        raise IndexRangeError(f"channel_slice: need 1 <= lo <= hi <= {x.C}, got lo={lo}, hi={hi}")
    start, stop = lo - 1, hi
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape, dtype=DTYPE)
        gx[:, start:stop] = g
        return (gx,)

    return record_op('channel_slice', (x,), x.data[:, start:stop], backward_fn)


def resample(x, mode='nearest-up-2x'):
    """Nearest-neighbour 2x upsampling; downsampling is done by strided conv2d."""
    if mode != 'nearest-up-2x':
        raise ConfigError(f"resample: unsupported mode {mode!r}")
    require_rank4(x, 'resample')
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return record_op('resample', (x,), out, lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def _log_softmax(z, axis):
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _label_mask(labels, shape, num_classes, ignore_index, where):
    labels = np.asarray(labels)
    if labels.shape != shape:
        raise DimensionError('labels', shape, labels.shape, where)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise IndexRangeError(f"{where}: label {int(labels[bad][0])} outside 0..{num_classes - 1} and not ignore_index {ignore_index}")
    return np.where(valid, labels, 0).astype(np.intp), valid


def softmax_channels(x):
    require_rank4(x, 'softmax_channels')
    p = np.exp(_log_softmax(x.data, 1))
    return record_op('softmax_channels', (x,), p, lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax_channels(x):
    require_rank4(x, 'log_softmax_channels')
    logp = _log_softmax(x.data, 1)
    p = np.exp(logp)
    return record_op('log_softmax_channels', (x,), logp, lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def softmax_vector(w):
    if w.ndim != 1:
        raise DimensionError('rank', 1, w.ndim, 'softmax_vector')
    p = np.exp(_log_softmax(w.data, 0))
    return record_op('softmax_vector', (w,), p, lambda g: (p * (g - (g * p).sum()),))


def mix(alpha, maps):
    """Convex combination sum_s alpha[s] * maps[s]."""
    if alpha.ndim != 1 or alpha.shape[0] != len(maps):
        raise DimensionError('modalities', len(maps), alpha.shape, 'mix')
    for m in maps[1:]:
        require_same_shape(maps[0], m, 'mix')
    weights = alpha.data
    out = sum(weights[s] * m.data for s, m in enumerate(maps))

    def backward_fn(g):
        galpha = np.array([np.sum(g * m.data) for m in maps])
        return (galpha,) + tuple(weights[s] * g for s in range(len(maps)))

    return record_op('mix', (alpha,) + tuple(maps), out, backward_fn)


def softmax_ce(logits, labels, ignore_index=255):
    """Returns (probs, loss): per-pixel softmax and mean NLL over non-ignored pixels."""
    require_rank4(logits, 'softmax_ce')
    n, k, h, w = logits.shape
    idx, valid = _label_mask(labels, (n, h, w), k, ignore_index, 'softmax_ce')
    logp = _log_softmax(logits.data, 1)
    probs = np.exp(logp)
    count = int(valid.sum())
    picked = np.take_along_axis(logp, idx[:, None], axis=1)[:, 0]
    loss = -np.sum(picked * valid) / max(count, 1)

    def backward_fn(g):
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
        return (g * (probs - onehot) * valid[:, None] / max(count, 1),)

    return Tensor._wrap(probs), record_op('softmax_ce', (logits,), loss, backward_fn)


def nll_probs(p, labels, ignore_index=255):
    """Mean -log p[label] for a probability map (the ensemble's own loss)."""
    require_rank4(p, 'nll_probs')
    n, k, h, w = p.shape
    idx, valid = _label_mask(labels, (n, h, w), k, ignore_index, 'nll_probs')
    count = max(int(valid.sum()), 1)
    picked = np.maximum(np.take_along_axis(p.data, idx[:, None], axis=1)[:, 0], LOG_FLOOR)
    loss = -np.sum(np.log(picked) * valid) / count

    def backward_fn(g):
        gp = np.zeros(p.shape, dtype=DTYPE)
        np.put_along_axis(gp, idx[:, None], (-(valid / (count * picked)))[:, None], axis=1)
        return (g * gp,)

    return record_op('nll_probs', (p,), loss, backward_fn)


def kl_to_target(logits, target, labels=None, ignore_index=255):
    """Mean over pixels of KL(target || softmax(logits)); ``target`` is a constant."""
    require_rank4(logits, 'kl_to_target')
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=DTYPE)
    if t.shape != logits.shape:
        raise DimensionError('shape', logits.shape, t.shape, 'kl_to_target')
    n, k, h, w = logits.shape
    if labels is None:
        valid = np.ones((n, h, w), dtype=bool)
    else:
        _, valid = _label_mask(labels, (n, h, w), k, ignore_index, 'kl_to_target')
    count = max(int(valid.sum()), 1)
    logq = _log_softmax(logits.data, 1)
    q = np.exp(logq)
    per_pixel = (xlogy(t, t) - t * logq).sum(axis=1)
    loss = np.sum(per_pixel * valid) / count
    mass = t.sum(axis=1, keepdims=True)
    return record_op('kl_to_target', (logits,), loss,
                     lambda g: (g * (q * mass - t) * valid[:, None] / count,))
