import logging

import numpy as np

from Config import config
from Errors import ConfigError, DimensionError, IndexRangeError
from Parameter import NORM, Parameter
from Tensor import DTYPE, require_rank4, record_op

logger = logging.getLogger(__name__)

PRIVATE = 'private'
SHARED = 'shared'


def batch_norm_train(x, gamma, beta, eps):
    """Normalize with this batch's per-channel statistics (biased variance).

    Returns (output tensor, batch mean, batch variance); the statistics are
    plain arrays for the running-average update.
    """
    require_rank4(x, 'batch_norm_train')
    count = x.N * x.H * x.W
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean[None, :, None, None]
    var = (centered ** 2).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    g = gamma.data[None, :, None, None]
    out = g * xhat + beta.data[None, :, None, None]

    def backward_fn(grad):
        gbeta = grad.sum(axis=(0, 2, 3))
        ggamma = (grad * xhat).sum(axis=(0, 2, 3))
        gx = (g * inv_std[None, :, None, None] / count) * (
            count * grad
            - gbeta[None, :, None, None]
            - xhat * ggamma[None, :, None, None]
        )
        return gx, ggamma, gbeta

    return record_op('batch_norm_train', (x, gamma, beta), out, backward_fn), mean, var


def batch_norm_eval(x, gamma, beta, mean, var, eps):
    """Normalize with fixed statistics; differentiable in x, gamma and beta."""
    require_rank4(x, 'batch_norm_eval')
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    g = gamma.data[None, :, None, None]
    out = g * xhat + beta.data[None, :, None, None]
    return record_op('batch_norm_eval', (x, gamma, beta), out, lambda grad: (
        grad * g * inv_std[None, :, None, None],
        (grad * xhat).sum(axis=(0, 2, 3)),
        grad.sum(axis=(0, 2, 3)),
    ))


class ModalityNorm:
    """Batch normalization with one statistics/affine set per modality.

    Modalities are numbered 1..S. In ``shared`` mode all S indices alias a
    single set, which is plain batch normalization.
    """

    def __init__(self, num_modalities, channels, mode=PRIVATE, eps=config.NORM_EPS,
                 momentum=config.NORM_MOMENTUM, name='norm'):
        if mode not in (PRIVATE, SHARED):
            raise ConfigError(f"{name}: norm mode must be {PRIVATE!r} or {SHARED!r}, got {mode!r}")
        if num_modalities < 1 or channels < 1:
            raise ConfigError(f"{name}: need at least one modality and one channel")
        self.name = name
        self.num_modalities = num_modalities
        self.channels = channels
        self.mode = mode
        self.eps = float(eps)
        self.momentum = float(momentum)

        sets = num_modalities if mode == PRIVATE else 1
        suffixes = [f".m{i}" for i in range(sets)] if mode == PRIVATE else ['']
        self.gammas = [Parameter(f"{name}.gamma{sfx}", np.ones(channels), NORM) for sfx in suffixes]
        self.betas = [Parameter(f"{name}.beta{sfx}", np.zeros(channels), NORM) for sfx in suffixes]
        self.running_means = [np.zeros(channels, dtype=DTYPE) for _ in suffixes]
        self.running_vars = [np.ones(channels, dtype=DTYPE) for _ in suffixes]
        self._suffixes = suffixes

    def _set_index(self, s):
        if not 1 <= s <= self.num_modalities:
            raise IndexRangeError(f"{self.name}: modality {s} outside 1..{self.num_modalities}")
        return s - 1 if self.mode == PRIVATE else 0

    def _check_channels(self, x):
        require_rank4(x, self.name)
        if x.C != self.channels:
            raise DimensionError('C', self.channels, x.C, self.name)

    def forward_train(self, x, s):
        self._check_channels(x)
        i = self._set_index(s)
        out, mean, var = batch_norm_train(x, self.gammas[i].value, self.betas[i].value, self.eps)
        m = self.momentum
        self.running_means[i] = (1.0 - m) * self.running_means[i] + m * mean
        self.running_vars[i] = (1.0 - m) * self.running_vars[i] + m * var
        return out

    def forward_eval(self, x, s):
        self._check_channels(x)
        i = self._set_index(s)
        return batch_norm_eval(x, self.gammas[i].value, self.betas[i].value,
                               self.running_means[i], self.running_vars[i], self.eps)

    def forward(self, x, s, train):
        return self.forward_train(x, s) if train else self.forward_eval(x, s)

    def parameters(self):
        return [p for pair in zip(self.gammas, self.betas) for p in pair]

    @property
    def learnable_count(self):
        return sum(p.size for p in self.parameters())

    def buffers(self):
        named = {}
        for i, sfx in enumerate(self._suffixes):
            named[f"{self.name}.running_mean{sfx}"] = self.running_means[i]
            named[f"{self.name}.running_var{sfx}"] = self.running_vars[i]
        return named

    def load_buffer(self, name, array):
        for i, sfx in enumerate(self._suffixes):
            if name == f"{self.name}.running_mean{sfx}":
                self.running_means[i] = np.array(array, dtype=DTYPE)
                return
            if name == f"{self.name}.running_var{sfx}":
                self.running_vars[i] = np.array(array, dtype=DTYPE)
                return
        raise KeyError(name)
