"""Central-difference gradient checks and the registry of checked ops."""
import logging
from dataclasses import asdict, dataclass

import numpy as np

from Config import config
from FusionOps import ShiftSpec, ShuffleConfig, attention_shapes, channel_shuffle, fuse_attention, pixel_shift, shift_fuse
from ModalityNorm import batch_norm_train
from Network import NetConfig, build, distillation_loss
from Tensor import (Graph, Tensor, add, channel_concat, channel_slice, conv2d, kl_to_target,
                    log_softmax_channels, mix, mul, nll_probs, relu, resample, scale, sigmoid,
                    softmax_ce, softmax_channels, softmax_vector, weighted_sum)

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-6
NET_TOLERANCE = 1e-5
# Relative error denominator floor; exact zeros on both sides compare equal.
REL_FLOOR = 1e-12
# Network inputs are resampled until every relu input clears KINK_MARGIN * eps.
KINK_MARGIN = 50
MAX_RESAMPLES = 64


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def to_record(self):
        record = asdict(self)
        record['passed'] = self.passed
        return record


def _scalar(out, rng):
    if out.ndim == 0:
        return out
    return weighted_sum(out, rng.normal(size=out.shape))


def grad_check(fn, arrays, eps=config.GRADCHECK_EPS, max_coords=None, seed=0, name='fn',
               tolerance=OP_TOLERANCE, largest=False):
    """Compare reverse-mode gradients of ``fn(*tensors)`` with central differences.

    Non-scalar outputs are projected to a scalar with fixed random weights.
    ``max_coords`` limits the coordinates checked per input: a random subset,
    or with ``largest`` the entries with the largest analytic gradient.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    projection_seed = seed + 7919

    def evaluate(values):
        return _scalar(fn(*[Tensor(v) for v in values]), np.random.default_rng(projection_seed)).item()

    with Graph() as graph:
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        loss = _scalar(fn(*tensors), np.random.default_rng(projection_seed))
    grads = graph.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for i, (array, tensor) in enumerate(zip(arrays, tensors)):
        analytic = grads[tensor]
        coords = np.arange(array.size)
        if max_coords is not None and array.size > max_coords:
            if largest:
                coords = np.argsort(-np.abs(analytic).ravel(), kind='stable')[:max_coords]
            else:
                coords = rng.choice(array.size, size=max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(flat, array.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, err)
            checked += 1
    logger.debug("gradcheck %s: max rel error %.3e over %d coordinates", name, worst, checked)
    return GradReport(name, float(worst), checked, tolerance)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _labels(rng, n, k, h, w):
    labels = rng.integers(0, k, size=(n, h, w))
    labels[0, 0, 0] = 255
    return labels


def _case_conv2d(rng):
    return (lambda x, w, b: conv2d(x, w, b, stride=2, pad=1),
            [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)])


def _case_relu(rng):
    return relu, [_away_from_zero(rng, (2, 3, 4, 4))]


def _case_add(rng):
    return add, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))]


def _case_scale(rng):
    return (lambda x: scale(x, -1.7)), [rng.normal(size=(2, 3, 4, 4))]


def _case_mul(rng):
    return mul, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))]


def _case_sigmoid(rng):
    return sigmoid, [rng.normal(size=(2, 3, 4, 4))]


def _case_concat_slice(rng):
    return (lambda a, b: channel_slice(channel_concat(a, b), 2, 5),
            [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 4, 4, 4))])


def _case_resample(rng):
    return resample, [rng.normal(size=(2, 3, 3, 3))]


def _case_softmax_channels(rng):
    return softmax_channels, [rng.normal(size=(2, 4, 3, 3))]


def _case_log_softmax_channels(rng):
    return log_softmax_channels, [rng.normal(size=(2, 4, 3, 3))]


def _case_softmax_vector(rng):
    return softmax_vector, [rng.normal(size=3)]


def _case_mix(rng):
    return ((lambda w, a, b: mix(softmax_vector(w), [a, b])),
            [rng.normal(size=2), rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))])


def _case_softmax_ce(rng):
    labels = _labels(rng, 2, 4, 3, 3)
    return (lambda z: softmax_ce(z, labels)[1]), [rng.normal(size=(2, 4, 3, 3))]


def _case_nll_probs(rng):
    labels = _labels(rng, 2, 4, 3, 3)
    return (lambda z: nll_probs(softmax_channels(z), labels)), [rng.normal(size=(2, 4, 3, 3))]


def _case_kl_to_target(rng):
    labels = _labels(rng, 2, 4, 3, 3)
    target = softmax_channels(Tensor(rng.normal(size=(2, 4, 3, 3)))).data
    return (lambda z: kl_to_target(z, target, labels)), [rng.normal(size=(2, 4, 3, 3))]


def _case_batch_norm(rng):
    return ((lambda x, g, b: batch_norm_train(x, g, b, config.NORM_EPS)[0]),
            [rng.normal(1.0, 2.0, size=(3, 4, 3, 3)), rng.normal(size=4), rng.normal(size=4)])


def _case_channel_shuffle(rng):
    cfg = ShuffleConfig(split_point=5)
    return ((lambda a, b: channel_concat(*channel_shuffle(a, b, cfg))),
            [rng.normal(size=(2, 8, 3, 3)), rng.normal(size=(2, 8, 3, 3))])


def _case_pixel_shift(rng):
    return (lambda x: pixel_shift(x, ShiftSpec())), [rng.normal(size=(2, 8, 4, 4))]


def _case_shift_fuse(rng):
    return ((lambda a, b: channel_concat(*shift_fuse(a, b, ShiftSpec()))),
            [rng.normal(size=(2, 8, 4, 4)), rng.normal(size=(2, 8, 4, 4))])


def _case_fuse_attention(rng):
    shapes = attention_shapes(4)
    keys = sorted(shapes)

    def fn(a, b, *theta):
        return fuse_attention(a, b, dict(zip(keys, theta)))

    return fn, [rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))] + \
        [rng.normal(0.0, 0.5, size=shapes[k]) for k in keys]


OP_CASES = {
    'conv2d': _case_conv2d,
    'relu': _case_relu,
    'add': _case_add,
    'scale': _case_scale,
    'mul': _case_mul,
    'sigmoid': _case_sigmoid,
    'channel_concat+slice': _case_concat_slice,
    'resample': _case_resample,
    'softmax_channels': _case_softmax_channels,
    'log_softmax_channels': _case_log_softmax_channels,
    'softmax_vector': _case_softmax_vector,
    'mix': _case_mix,
    'softmax_ce': _case_softmax_ce,
    'nll_probs': _case_nll_probs,
    'kl_to_target': _case_kl_to_target,
    'batch_norm_train': _case_batch_norm,
    'channel_shuffle': _case_channel_shuffle,
    'pixel_shift': _case_pixel_shift,
    'shift_fuse': _case_shift_fuse,
    'fuse_attention': _case_fuse_attention,
}

TINY_NET = NetConfig(modalities=2, num_classes=3, stem_width=8, widths=(8, 8), blocks=(1, 1),
                     expansion=1, classifier_init='normal', seed=3)


def kink_distance(net, inputs):
    """Smallest |relu input| over one training-mode forward pass."""
    with Graph() as graph:
        net.forward_multimodal(inputs, train=True)
    pre = [np.abs(node.inputs[0].data).min() for node in graph.nodes if node.op == 'relu']
    return float(min(pre)) if pre else np.inf


def check_network(cfg=TINY_NET, seed=0, max_coords=4, size=4, eps=config.GRADCHECK_EPS):
    """End-to-end check of the training loss w.r.t. every parameter array.

    Inputs are resampled until no relu input lies within KINK_MARGIN * eps of
    zero, and each array is checked at its largest-gradient entries.
    The distillation weight is 0 here: its target is a stopped-gradient
    constant, which finite differences would not hold fixed.
    """
    net = build(cfg)
    params = net.parameters()
    initial = [p.value.data.copy() for p in params]
    for attempt in range(MAX_RESAMPLES):
        rng = np.random.default_rng((seed, attempt))
        inputs = [rng.normal(size=(2, cfg.in_channels, size, size)) for _ in range(cfg.modalities)]
        margin = kink_distance(net, inputs)
        if margin >= KINK_MARGIN * eps:
            break
    else:
        logger.warning("no input sample clears relu kinks by %g after %d tries", KINK_MARGIN * eps, MAX_RESAMPLES)
    logger.debug("network gradcheck inputs: attempt %d, kink distance %.3e", attempt, margin)
    labels = rng.integers(0, cfg.num_classes, size=(2, size, size))

    def fn(*values):
        for p, v in zip(params, values):
            p.value = v
        output = net.forward_multimodal(inputs, train=True)
        return distillation_loss(output, labels, lam=0.0)[0]

    return grad_check(fn, initial, eps=eps, max_coords=max_coords, seed=seed, name='network',
                      tolerance=NET_TOLERANCE, largest=True)


def run_suite(seed=0, ops=None, include_network=True):
    """GradReport per registered op (and the tiny network)."""
    reports = []
    for name, case in OP_CASES.items():
        if ops is not None and name not in ops:
            continue
        fn, arrays = case(np.random.default_rng(seed))
        reports.append(grad_check(fn, arrays, seed=seed, name=name))
    if include_network:
        reports.append(check_network(seed=seed))
    return reports
