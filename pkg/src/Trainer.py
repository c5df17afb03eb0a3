"""Training loop: seeded batches, distillation loss, SGD step."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from Config import config
from Errors import ConfigError, NaNLossError
from Metrics import evaluate
from Network import distillation_loss, predict
from Optimizer import SGD, poly_lr
from Tensor import Graph

logger = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = config.LR
    momentum: float = config.MOMENTUM
    weight_decay: float = config.WEIGHT_DECAY
    batch_size: int = config.BATCH_SIZE
    epochs: int = config.EPOCHS
    distill: bool = True
    distill_lambda: float = config.DISTILL_LAMBDA
    power: float = 0.9

    def validate(self):
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0, weight_decay >= 0 and 0 <= momentum < 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need batch_size >= 1 and epochs >= 0")
        return self

    @property
    def effective_lambda(self):
        return self.distill_lambda if self.distill else 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    losses: dict = field(default_factory=dict)


def make_optimizer(net, cfg):
    return SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
               weight_decay=cfg.weight_decay, power=cfg.power)


def train_step(net, batch, optimizer, lr=None, lam=config.DISTILL_LAMBDA):
    """One SGD step on ``(inputs, labels)``; returns the loss parts before the update."""
    inputs, labels = batch
    with Graph() as graph:
        output = net.forward_multimodal(inputs, train=True)
        loss, parts = distillation_loss(output, labels, lam)
    if not math.isfinite(parts['total']):
        raise NaNLossError(optimizer.step_count, parts)
    optimizer.step(graph.backward(loss), lr)
    return parts


def fit(net, train, cfg, seed=0, optimizer=None):
    """Train ``net`` on a SynthSplit for ``cfg.epochs`` epochs."""
    cfg.validate()
    optimizer = optimizer or make_optimizer(net, cfg)
    rng = np.random.default_rng(seed)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        sums = {}
        lr = cfg.lr
        for start in range(0, len(train), cfg.batch_size):
            lr = poly_lr(cfg.lr, optimizer.step_count, total_steps, cfg.power)
            parts = train_step(net, train.batch(order[start:start + cfg.batch_size]), optimizer,
                               lr, cfg.effective_lambda)
            for key, value in parts.items():
                sums[key] = sums.get(key, 0.0) + value
        losses = {key: value / steps_per_epoch for key, value in sums.items()}
        history.append(EpochLog(epoch, lr, losses))
        logger.info("epoch %d/%d lr=%.5f loss=%.4f", epoch + 1, cfg.epochs, lr, losses.get('total', float('nan')))
    return optimizer, history


def evaluate_split(net, split, num_classes, batch_size=config.BATCH_SIZE):
    """Metrics for the ensemble and for every modality's own prediction."""
    inputs, labels = split.batch(np.arange(len(split)))
    fused, single = predict(net, inputs, batch_size)
    return {
        'ensemble': evaluate(fused, labels, num_classes),
        'modalities': [evaluate(p, labels, num_classes) for p in single],
    }
