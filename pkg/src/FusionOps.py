"""Cross-modal fusion operations.

The asymmetric pair (channel shuffle, pixel shift) carries no parameters.
The symmetric baselines (average, add, concat, attention) live here too so the
symmetry probe and the network run the very same code.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from Config import config
from Errors import ConfigError, DimensionError, IndexRangeError
from Tensor import (DTYPE, add, channel_concat, channel_slice, conv2d, mul, record_op,
                    relu, require_rank4, require_same_shape, scale, sigmoid)

logger = logging.getLogger(__name__)

# (row offset, column offset) per channel group: right, down, left, up
SHIFT_DIRECTIONS = ((0, -1), (-1, 0), (0, 1), (1, 0))

BIDIRECTIONAL = 'bidirectional'
ONE_TO_TWO = '1to2'
TWO_TO_ONE = '2to1'
NO_FUSION = 'none'
DIRECTIONS = (BIDIRECTIONAL, ONE_TO_TWO, TWO_TO_ONE, NO_FUSION)


@dataclass(frozen=True)
class ShuffleConfig:
    split_fraction: float = config.SPLIT_FRACTION
    split_point: int | None = None

    def resolve(self, channels):
        """Split point T (1-based): channels 1..T stay, T+1..C are exchanged."""
        if self.split_point is not None:
            t = self.split_point
        else:
            # Half-up rounding, clamped so both parts are non-empty
            t = min(max(int(math.floor(self.split_fraction * channels + 0.5)), 1), channels - 1)
        if not 1 <= t < channels:
            raise IndexRangeError(f"channel_shuffle: split point {t} outside 1..{channels - 1}")
        return t


@dataclass(frozen=True)
class ShiftSpec:
    directions: tuple = field(default=SHIFT_DIRECTIONS)

    def __post_init__(self):
        if len(self.directions) != 4 or len(set(self.directions)) != 4:
            raise ConfigError(f"ShiftSpec needs four distinct directions, got {self.directions}")

    def group_size(self, channels):
        if channels % 4:
            raise DimensionError('C', 'a multiple of 4', channels, 'pixel_shift')
        return channels // 4


def donor_of(s, num_modalities):
    """Ring partner (0-based): branch s receives from branch s + 1 mod S."""
    return (s + 1) % num_modalities


def receivers_for(direction, num_modalities):
    """0-based branches that receive fused features for a fusion direction."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown fusion direction {direction!r}; expected one of {', '.join(DIRECTIONS)}")
    if num_modalities < 2 or direction == NO_FUSION:
        return ()
    if direction == BIDIRECTIONAL:
        return tuple(range(num_modalities))
    if num_modalities != 2:
        raise ConfigError(f"direction {direction!r} needs exactly two modalities, got {num_modalities}")
    return (1,) if direction == ONE_TO_TWO else (0,)


def _exchange(own, donor, t):
    c = own.C
    return channel_concat(channel_slice(own, 1, t), channel_slice(donor, t + 1, c))


def channel_shuffle(x1, x2, cfg=ShuffleConfig()):
    """f1 = x1[1..T] || x2[T+1..C], f2 = x2[1..T] || x1[T+1..C]."""
    require_rank4(x1, 'channel_shuffle')
    require_same_shape(x1, x2, 'channel_shuffle')
    t = cfg.resolve(x1.C)
    return _exchange(x1, x2, t), _exchange(x2, x1, t)


def shuffle_ring(xs, cfg, receivers):
    """Channel shuffle over S branches; only ``receivers`` take donor channels."""
    if not receivers:
        return list(xs)
    for x in xs[1:]:
        require_same_shape(xs[0], x, 'channel_shuffle')
    t = cfg.resolve(xs[0].C)
    out = list(xs)
    for s in receivers:
        out[s] = _exchange(xs[s], xs[donor_of(s, len(xs))], t)
    return out


def _shift_slices(offset, size):
    # out[i] = x[i + offset]; returns (destination, source)
    if offset == 0:
        return slice(0, size), slice(0, size)
    if offset < 0:
        return slice(-offset, size), slice(0, size + offset)
    return slice(0, size - offset), slice(offset, size)


def pixel_shift(x, spec=ShiftSpec()):
    """Shift each quarter of the channels one pixel, filling the border with zeros."""
    require_rank4(x, 'pixel_shift')
    n, c, h, w = x.shape
    size = spec.group_size(c)
    routes = []
    for group, (dh, dw) in enumerate(spec.directions):
        rows_dst, rows_src = _shift_slices(dh, h)
        cols_dst, cols_src = _shift_slices(dw, w)
        chans = slice(group * size, (group + 1) * size)
        routes.append((chans, rows_dst, rows_src, cols_dst, cols_src))

    out = np.zeros(x.shape, dtype=DTYPE)
    for chans, rd, rs, cd, cs in routes:
        out[:, chans, rd, cd] = x.data[:, chans, rs, cs]

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        for chans, rd, rs, cd, cs in routes:
            gx[:, chans, rs, cs] = g[:, chans, rd, cd]
        return (gx,)

    return record_op('pixel_shift', (x,), out, backward_fn)


def shift_fuse(x1, x2, spec=ShiftSpec()):
    """f1 = x1 + shift(x2), f2 = x2 + shift(x1)."""
    require_same_shape(x1, x2, 'shift_fuse')
    return add(x1, pixel_shift(x2, spec)), add(x2, pixel_shift(x1, spec))


def fuse_average(a, b):
    return scale(add(a, b), 0.5)


def fuse_add(a, b):
    return add(a, b)


def fuse_concat(a, b):
    return channel_concat(a, b)


def attention_shapes(channels):
    """Parameter shapes of the attention fusion block for C-channel inputs."""
    hidden = max(channels // 2, 1)
    return {
        'squeeze_w': (hidden, 2 * channels, 1, 1),
        'squeeze_b': (hidden,),
        'gate_w': (2 * channels, hidden, 1, 1),
        'gate_b': (2 * channels,),
    }


def fuse_attention(a, b, theta):
    """Gate both inputs from their concatenation: g_a * a + g_b * b.

    ``theta`` maps the names of ``attention_shapes`` to tensors.
    """
    c = a.C
    hidden = relu(conv2d(channel_concat(a, b), theta['squeeze_w'], theta['squeeze_b']))
    gate = sigmoid(conv2d(hidden, theta['gate_w'], theta['gate_b']))
    return add(mul(channel_slice(gate, 1, c), a), mul(channel_slice(gate, c + 1, 2 * c), b))


def swap_attention_theta(theta, channels):
    """Exchange the modality-specific parameter groups of an attention block."""
    perm = np.concatenate([np.arange(channels, 2 * channels), np.arange(channels)])
    return {
        'squeeze_w': theta['squeeze_w'][:, perm],
        'squeeze_b': theta['squeeze_b'],
        'gate_w': theta['gate_w'][perm],
        'gate_b': theta['gate_b'][perm],
    }
