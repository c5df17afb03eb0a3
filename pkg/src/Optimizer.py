"""SGD with momentum and a polynomial learning-rate schedule."""
import numpy as np

from Config import config
from Errors import IntegrityError

VELOCITY_PREFIX = 'optim.velocity.'


def poly_lr(base_lr, step, total_steps, power=0.9):
    if total_steps <= 0:
        return base_lr
    return base_lr * (1.0 - min(step, total_steps) / total_steps) ** power


class SGD:
    """v <- mu * v + (g + wd * p); p <- p - lr * v. Weight decay applies to ``decay`` parameters only."""

    def __init__(self, parameters, lr=config.LR, momentum=config.MOMENTUM,
                 weight_decay=config.WEIGHT_DECAY, power=0.9):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.power = power
        self.step_count = 0
        self.velocity = {p.name: np.zeros(p.shape) for p in self.parameters}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.parameters:
            g = grads[p.value]
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value.data
            v = self.momentum * self.velocity[p.name] + g
            self.velocity[p.name] = v
            p.assign(p.value.data - lr * v)
        self.step_count += 1

    def settings(self):
        return {'lr': self.lr, 'momentum': self.momentum, 'weight_decay': self.weight_decay,
                'power': self.power, 'step': self.step_count}

    def state(self):
        """Velocity buffers keyed the way checkpoints store them."""
        return {VELOCITY_PREFIX + name: v for name, v in self.velocity.items()}

    def load_state(self, arrays, settings):
        for name in self.velocity:
            key = VELOCITY_PREFIX + name
            if key not in arrays:
                raise IntegrityError(key, "missing from checkpoint")
            if arrays[key].shape != self.velocity[name].shape:
                raise IntegrityError(key, f"shape {arrays[key].shape}, expected {self.velocity[name].shape}")
            self.velocity[name] = np.array(arrays[key], dtype=np.float64)
        self.lr = settings['lr']
        self.momentum = settings['momentum']
        self.weight_decay = settings['weight_decay']
        self.power = settings.get('power', self.power)
        self.step_count = settings['step']
