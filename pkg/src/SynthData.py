"""Synthetic multimodal segmentation data with complementary modalities.

Labels come from a Voronoi partition. Each single-channel modality shows the
classes assigned to it as distinct intensities (k + 1) / K and every other
class as the uninformative 0.5, plus Gaussian noise. No single modality can
separate all classes; together they can.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import integrate
from scipy.stats import norm

from Errors import ConfigError
from PortableRandom import MASK64, PortableRandom

logger = logging.getLogger(__name__)

HIDDEN_INTENSITY = 0.5
TRAIN, TEST = 0, 1


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 5
    modalities: int = 2
    regions: int = 24
    noise: float = 0.05
    visibility: tuple | None = None
    gains: tuple | None = None
    offsets: tuple | None = None
    train_size: int = 512
    test_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.visibility is not None:
            self.visibility = tuple(tuple(int(k) for k in v) for v in self.visibility)
        if self.gains is not None:
            self.gains = tuple(float(g) for g in self.gains)
        if self.offsets is not None:
            self.offsets = tuple(float(o) for o in self.offsets)

    def visible_sets(self):
        """Classes each modality can see; by default class k goes to modality (k + 1) mod S."""
        if self.visibility is not None:
            return [frozenset(v) for v in self.visibility]
        return [frozenset(k for k in range(self.num_classes) if (k + 1) % self.modalities == s)
                for s in range(self.modalities)]

    def means(self):
        """(S, K) noise-free intensity of class k in modality s."""
        table = np.full((self.modalities, self.num_classes), HIDDEN_INTENSITY)
        for s, visible in enumerate(self.visible_sets()):
            for k in visible:
                table[s, k] = (k + 1) / self.num_classes
        return table

    def validate(self):
        if self.height < 1 or self.width < 1 or self.modalities < 1 or self.num_classes < 2:
            raise ConfigError("synthetic data needs H, W, S >= 1 and K >= 2")
        if not 1 <= self.regions <= self.height * self.width:
            raise ConfigError(f"regions {self.regions} must lie in 1..{self.height * self.width}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not 0 <= self.seed < 2 ** 31:
            raise ConfigError(f"seed must lie in 0..2**31-1, got {self.seed}")
        if self.visibility is not None and len(self.visibility) != self.modalities:
            raise ConfigError(f"visibility lists {len(self.visibility)} modalities, expected {self.modalities}")
        for name in ('gains', 'offsets'):
            values = getattr(self, name)
            if values is not None and len(values) != self.modalities:
                raise ConfigError(f"{name} lists {len(values)} modalities, expected {self.modalities}")
        covered = set().union(*self.visible_sets())
        if any(k < 0 or k >= self.num_classes for k in covered):
            raise ConfigError(f"visibility names classes outside 0..{self.num_classes - 1}")
        missing = set(range(self.num_classes)) - covered
        if missing:
            raise ConfigError(f"classes {sorted(missing)} are visible in no modality")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class Sample:
    inputs: list
    labels: np.ndarray


@dataclass
class SynthSplit:
    """``inputs`` is (count, S, H, W) float32, ``labels`` is (count, H, W) uint8."""

    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def modalities(self):
        return self.inputs.shape[1]

    def batch(self, indices):
        """S arrays of (n, 1, H, W) float64 and the (n, H, W) label maps."""
        chunk = self.inputs[indices].astype(np.float64)
        return [chunk[:, s:s + 1] for s in range(self.modalities)], self.labels[indices].astype(np.int64)

    def sample(self, i):
        return Sample([self.inputs[i, s][None, None].astype(np.float64) for s in range(self.modalities)],
                      self.labels[i].astype(np.int64))

    def modality(self, s):
        """Single-modality view for unimodal baselines."""
        return SynthSplit(self.inputs[:, s:s + 1], self.labels)


def sample_seed(seed, split, index):
    """Per-sample seed; train and test streams never share a value."""
    return (((seed << 33) | (split << 32)) ^ index) & MASK64


def generate_sample(cfg, seed):
    rng = PortableRandom(seed)
    h, w = cfg.height, cfg.width
    centers_y = rng.uniform(cfg.regions) * h
    centers_x = rng.uniform(cfg.regions) * w
    region_labels = rng.integers(cfg.regions, cfg.num_classes)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dist = (yy[None] - centers_y[:, None, None]) ** 2 + (xx[None] - centers_x[:, None, None]) ** 2
    labels = region_labels[np.argmin(dist, axis=0)]

    means = cfg.means()
    gains = cfg.gains or (1.0,) * cfg.modalities
    offsets = cfg.offsets or (0.0,) * cfg.modalities
    inputs = np.empty((cfg.modalities, h, w), dtype=np.float32)
    for s in range(cfg.modalities):
        clean = means[s][labels]
        noisy = clean + cfg.noise * rng.normal(h * w).reshape(h, w)
        inputs[s] = gains[s] * noisy + offsets[s]
    return inputs, labels.astype(np.uint8)


def _generate_split(cfg, split, count):
    inputs = np.empty((count, cfg.modalities, cfg.height, cfg.width), dtype=np.float32)
    labels = np.empty((count, cfg.height, cfg.width), dtype=np.uint8)
    for i in range(count):
        inputs[i], labels[i] = generate_sample(cfg, sample_seed(cfg.seed, split, i))
    return SynthSplit(inputs, labels)


def generate(cfg):
    """(train, test) splits, fully determined by the config."""
    cfg.validate()
    logger.info("generating %d train / %d test samples (seed %d)", cfg.train_size, cfg.test_size, cfg.seed)
    return _generate_split(cfg, TRAIN, cfg.train_size), _generate_split(cfg, TEST, cfg.test_size)


@dataclass
class BayesCeiling:
    per_modality: list = field(default_factory=list)
    fused: float = 0.0

    def to_record(self):
        return asdict(self)


def _distinct_fraction(points, priors):
    # Zero noise: within a group of identical means the best guess is the most likely class.
    groups = {}
    for point, prior in zip(map(tuple, points), priors):
        groups[point] = max(groups.get(point, 0.0), prior)
    return float(sum(groups.values()))


def _unimodal_ceiling(means, priors, sigma):
    if sigma == 0:
        return _distinct_fraction(means[:, None], priors)
    lo, hi = means.min() - 10 * sigma, means.max() + 10 * sigma

    def density(y):
        return np.max(priors * norm.pdf(y, means, sigma))

    value, _ = integrate.quad(density, lo, hi, points=sorted(set(means.tolist())), limit=500)
    return float(value)


def _fused_ceiling(means, priors, sigma, seed):
    # means: (S, K)
    if sigma == 0:
        return _distinct_fraction(means.T, priors)
    if means.shape[0] == 1:
        return _unimodal_ceiling(means[0], priors, sigma)
    if means.shape[0] == 2:
        step = sigma / 25
        axis = np.arange(means.min() - 8 * sigma, means.max() + 8 * sigma + step, step)
        y1, y2 = np.meshgrid(axis, axis, indexing='ij')
        best = np.zeros_like(y1)
        for k in range(means.shape[1]):
            joint = priors[k] * norm.pdf(y1, means[0, k], sigma) * norm.pdf(y2, means[1, k], sigma)
            np.maximum(best, joint, out=best)
        return float(integrate.trapezoid(integrate.trapezoid(best, axis, axis=1), axis))
    # Beyond two modalities: Monte Carlo over the generative model
    rng = np.random.default_rng(seed)
    draws = 200_000
    classes = rng.choice(means.shape[1], size=draws, p=priors)
    y = means[:, classes].T + sigma * rng.normal(size=(draws, means.shape[0]))
    loglik = -((y[:, None, :] - means.T[None]) ** 2).sum(axis=2) / (2 * sigma ** 2) + np.log(priors)[None]
    return float(np.mean(np.argmax(loglik, axis=1) == classes))


def bayes_ceiling(cfg):
    """Per-pixel Bayes-optimal accuracy for each modality alone and for all together."""
    cfg.validate()
    means = cfg.means()
    priors = np.full(cfg.num_classes, 1.0 / cfg.num_classes)
    per_modality = [_unimodal_ceiling(means[s], priors, cfg.noise) for s in range(cfg.modalities)]
    fused = _fused_ceiling(means, priors, cfg.noise, cfg.seed)
    return BayesCeiling(per_modality, max(fused, *per_modality))
