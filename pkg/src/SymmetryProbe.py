"""Executable check of the symmetric/asymmetric fusion-block definition.

A block F is symmetric when for every (theta1, C1) there are (theta2, C2) with
C1(F(x1, x2; theta1)) == C2(F(x2, x1; theta2)) for all inputs, C being a
pointwise convolution. ``verify_symmetric_by_construction`` builds the
matching (theta2, C2) for the known symmetric blocks; ``refute_symmetry_by_search``
fits the best pointwise C2 for a parameter-free block and reports the
held-out mismatch as a witness.
"""
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg

from Errors import UnknownBlockError
from FusionOps import (ShiftSpec, ShuffleConfig, attention_shapes, channel_shuffle,
                       fuse_add, fuse_attention, fuse_average, fuse_concat, shift_fuse,
                       swap_attention_theta)
from Tensor import Tensor, conv2d

logger = logging.getLogger(__name__)

SYMMETRIC_CONSTRUCTIVE = 'symmetric-constructive'
ASYMMETRIC_WITNESS = 'asymmetric-witness'
INCONCLUSIVE = 'inconclusive'

CONSTRUCTIVE_BLOCKS = ('average', 'add', 'concat', 'attention')
SEARCH_BLOCKS = ('channel_shuffle', 'shift_fuse', 'average', 'add', 'concat')

CONSTRUCTIVE_TOL = 1e-9
RIDGE = 1e-8


@dataclass
class SymmetryVerdict:
    block: str
    verdict: str
    residual: float
    tolerance: float
    max_abs: float
    trials: int
    regularized: bool = False
    witness: dict | None = None
    note: str = ''

    def to_record(self):
        return asdict(self)


def _pointwise(weight, bias, x):
    return conv2d(x, Tensor(weight[:, :, None, None]), Tensor(bias)).data


def _random_pointwise(rng, cout, cin):
    return rng.normal(0.0, 1.0 / np.sqrt(cin), (cout, cin)), rng.normal(0.0, 0.1, cout)


def _fused_width(block, channels):
    return 2 * channels if block == 'concat' else channels


def verify_symmetric_by_construction(block, theta1=None, c1=None, trials=20, seed=0,
                                     channels=8, size=8, tol=CONSTRUCTIVE_TOL):
    """Check C1(F(x1,x2;theta1)) == C2(F(x2,x1;theta2)) with the block's swap rule."""
    if block not in CONSTRUCTIVE_BLOCKS:
        raise UnknownBlockError(block, CONSTRUCTIVE_BLOCKS)
    rng = np.random.default_rng(seed)
    width = _fused_width(block, channels)
    w1, b1 = c1 if c1 is not None else _random_pointwise(rng, channels, width)

    theta2 = None
    if block == 'concat':
        # Swap the input-channel blocks that read x1 and x2
        perm = np.concatenate([np.arange(channels, width), np.arange(channels)])
        w2, b2 = w1[:, perm], b1
    else:
        w2, b2 = w1, b1
    if block == 'attention':
        if theta1 is None:
            theta1 = {k: rng.normal(0.0, 0.5, shape) for k, shape in attention_shapes(channels).items()}
        theta2 = swap_attention_theta(theta1, channels)

    fuse = _constructive_fuse(block)
    residual = 0.0
    max_abs = 0.0
    for _ in range(trials):
        x1 = Tensor(rng.normal(size=(1, channels, size, size)))
        x2 = Tensor(rng.normal(size=(1, channels, size, size)))
        y1 = _pointwise(w1, b1, fuse(x1, x2, theta1))
        y2 = _pointwise(w2, b2, fuse(x2, x1, theta2))
        diff = y1 - y2
        max_abs = max(max_abs, float(np.abs(diff).max()))
        residual = max(residual, float(np.linalg.norm(diff) / max(np.linalg.norm(y1), 1e-300)))

    verdict = SYMMETRIC_CONSTRUCTIVE if max_abs < tol else INCONCLUSIVE
    logger.debug("constructive check %s: max_abs=%.3e residual=%.3e", block, max_abs, residual)
    return SymmetryVerdict(block, verdict, residual, tol, max_abs, trials,
                           note='swap construction' if block in ('concat', 'attention') else 'C2 = C1')


def _constructive_fuse(block):
    if block == 'average':
        return lambda a, b, theta: fuse_average(a, b)
    if block == 'add':
        return lambda a, b, theta: fuse_add(a, b)
    if block == 'concat':
        return lambda a, b, theta: fuse_concat(a, b)
    return lambda a, b, theta: fuse_attention(a, b, {k: Tensor(v) for k, v in theta.items()})


def _search_fuse(block, split_point):
    if block == 'channel_shuffle':
        cfg = ShuffleConfig(split_point=split_point) if split_point else ShuffleConfig()
        return lambda a, b: channel_shuffle(a, b, cfg)[0]
    if block == 'shift_fuse':
        spec = ShiftSpec()
        return lambda a, b: shift_fuse(a, b, spec)[0]
    if block == 'average':
        return fuse_average
    if block == 'add':
        return fuse_add
    return fuse_concat


def _pixels(x):
    # (N, C, H, W) -> (N*H*W, C)
    return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])


def _design(fuse, w1, b1, x1, x2):
    target = _pixels(_pointwise(w1, b1, fuse(x1, x2)))
    swapped = _pixels(fuse(x2, x1).data)
    return np.hstack([swapped, np.ones((swapped.shape[0], 1))]), target


def _solve_normal_equations(design, target):
    gram = design.T @ design
    rhs = design.T @ target
    with warnings.catch_warnings():
        warnings.simplefilter('error', scipy.linalg.LinAlgWarning)
        try:
            return scipy.linalg.solve(gram, rhs, assume_a='pos'), False
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
            pass
    gram = gram + RIDGE * np.eye(gram.shape[0])
    return scipy.linalg.solve(gram, rhs, assume_a='pos'), True


def refute_symmetry_by_search(block, c1=None, sample_count=256, tol=0.1, seed=0,
                              channels=8, size=8, split_point=None, zero_first=False,
                              held_out=None):
    """Fit the best pointwise C2 by least squares and measure the held-out mismatch.

    Only parameter-free blocks qualify, so the existence of theta2 reduces to
    the existence of C2. ``zero_first`` forces x1 = 0 in every pair.
    """
    if block not in SEARCH_BLOCKS:
        raise UnknownBlockError(block, SEARCH_BLOCKS)
    rng = np.random.default_rng(seed)
    width = _fused_width(block, channels)
    w1, b1 = c1 if c1 is not None else _random_pointwise(rng, channels, width)
    fuse = _search_fuse(block, split_point)
    held_out = held_out or max(sample_count // 4, 8)

    def draw(count):
        x2 = rng.normal(size=(count, channels, size, size))
        x1 = np.zeros_like(x2) if zero_first else rng.normal(size=x2.shape)
        return Tensor(x1), Tensor(x2)

    x1, x2 = draw(sample_count)
    design, target = _design(fuse, w1, b1, x1, x2)
    c2, regularized = _solve_normal_equations(design, target)

    h1, h2 = draw(held_out)
    design_h, target_h = _design(fuse, w1, b1, h1, h2)
    err = (design_h @ c2 - target_h).reshape(held_out, -1)
    ref = target_h.reshape(held_out, -1)
    residual = float(np.sqrt(np.sum(err ** 2) / max(np.sum(ref ** 2), 1e-300)))
    per_pair = np.linalg.norm(err, axis=1) / np.maximum(np.linalg.norm(ref, axis=1), 1e-300)
    worst = int(np.argmax(per_pair))

    if residual > tol:
        verdict = ASYMMETRIC_WITNESS
        witness = {
            'pair': worst,
            'residual': float(per_pair[worst]),
            'x1': h1.data[worst].tolist(),
            'x2': h2.data[worst].tolist(),
        }
    else:
        verdict = INCONCLUSIVE
        witness = None
    note = 'least-squares pointwise C2 with bias'
    if regularized:
        note += f"; normal equations regularized with ridge {RIDGE:g}"
    logger.debug("refuter %s: residual=%.3e verdict=%s", block, residual, verdict)
    return SymmetryVerdict(block, verdict, residual, tol, float(np.abs(err).max()), sample_count,
                           regularized=regularized, witness=witness, note=note)
