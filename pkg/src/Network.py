"""Bidirectional multi-layer fusion network.

One encoder is shared by every modality branch: convolutions are shared (or
copied per modality for the ``individual`` ablation) while each modality keeps
its own normalization set. The last block of every stage is a fusion block.
A shared decoder turns each branch into logits and a learned ensemble mixes
the per-modality probability maps.

The architecture is described once by ``walk``; building a network and
counting its parameters are two visitors of the same walk.
"""
import hashlib
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from Config import config
from Errors import ConfigError, DimensionError
from FusionOps import (BIDIRECTIONAL, DIRECTIONS, NO_FUSION, ShiftSpec, ShuffleConfig,
                       attention_shapes, donor_of, fuse_attention, fuse_average,
                       pixel_shift, receivers_for, shuffle_ring)
from ModalityNorm import PRIVATE, SHARED, ModalityNorm
from Parameter import BIAS, CONV, ENSEMBLE, Parameter
from Tensor import (Tensor, add, channel_concat, conv2d, kl_to_target, mix, nll_probs,
                    relu, resample, scale, softmax_ce, softmax_channels, softmax_vector,
                    stop_gradient, sum_scalars)

logger = logging.getLogger(__name__)

# Encoder sharing strategies
INDIVIDUAL = 'individual'
SHARED_NORMS = 'shared'
PRIVATE_NORMS = 'private'
SHARING = {
    INDIVIDUAL: 'individual-convs+individual-norms',
    SHARED_NORMS: 'shared-convs+shared-norms',
    PRIVATE_NORMS: 'shared-convs+individual-norms',
}

ASYM = 'asym'
METHODS = (ASYM, 'concat', 'average', 'attention')


@dataclass(frozen=True)
class FusionBlockConfig:
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    projection: bool = False
    shuffle: ShuffleConfig | None = None
    shift: ShiftSpec | None = None
    cross_skip_only: bool = False
    direction: str = NO_FUSION
    method: str = ASYM

    @property
    def is_fusion(self):
        return self.direction != NO_FUSION


@dataclass
class NetConfig:
    modalities: int = 2
    in_channels: int = 1
    num_classes: int = 5
    stem_width: int = 16
    widths: tuple = (8, 16, 32)
    blocks: tuple = (1, 1, 1)
    expansion: int = 2
    sharing: str = PRIVATE_NORMS
    method: str = ASYM
    shuffle: bool = True
    shift: bool = True
    cross_skip_only: bool = False
    direction: str = BIDIRECTIONAL
    split_fraction: float = config.SPLIT_FRACTION
    classifier_init: str = 'zeros'
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)

    def validate(self):
        if self.modalities < 1:
            raise ConfigError(f"modalities must be >= 1, got {self.modalities}")
        if len(self.widths) < 2:
            raise ConfigError(f"need at least two stages, got {len(self.widths)}")
        if len(self.widths) != len(self.blocks):
            raise ConfigError(f"widths {self.widths} and blocks {self.blocks} differ in length")
        if min(self.widths) < 1 or min(self.blocks) < 1 or self.expansion < 1 or self.stem_width < 1:
            raise ConfigError("widths, blocks, expansion and stem_width must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sharing not in SHARING:
            raise ConfigError(f"unknown sharing strategy {self.sharing!r}; expected one of {', '.join(SHARING)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown fusion method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}; expected one of {', '.join(DIRECTIONS)}")
        if self.method != ASYM and (self.shuffle or self.shift or self.cross_skip_only):
            raise ConfigError(f"shuffle/shift/cross_skip_only apply to method {ASYM!r} only")
        if self.classifier_init not in ('zeros', 'normal'):
            raise ConfigError(f"classifier_init must be 'zeros' or 'normal', got {self.classifier_init!r}")
        receivers_for(self.direction, self.modalities)
        for width in self.widths:
            if self.shift and not self.cross_skip_only and width % 4:
                raise ConfigError(f"width {width} must be divisible by 4 when pixel shift is enabled")
            if self.shuffle and width < 2:
                raise ConfigError(f"width {width} too narrow for channel shuffle")
        if self.shuffle:
            for width in self.widths:
                ShuffleConfig(self.split_fraction).resolve(width)
        return self

    @property
    def encoder_norm_mode(self):
        return SHARED if self.sharing == SHARED_NORMS else PRIVATE

    @property
    def shared_convs(self):
        return self.sharing != INDIVIDUAL

    def block_config(self, stage, index, in_channels):
        mid = self.widths[stage]
        last = index == self.blocks[stage] - 1
        fusing = last and self.direction != NO_FUSION and self.modalities > 1
        return FusionBlockConfig(
            in_channels=in_channels,
            mid_channels=mid,
            out_channels=mid * self.expansion,
            stride=2 if stage > 0 and index == 0 else 1,
            projection=index == 0,
            shuffle=ShuffleConfig(self.split_fraction) if fusing and self.shuffle else None,
            shift=ShiftSpec() if fusing and self.shift and not self.cross_skip_only else None,
            cross_skip_only=fusing and self.cross_skip_only,
            direction=self.direction if fusing else NO_FUSION,
            method=self.method,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def walk(cfg, sink):
    """Describe the architecture to ``sink`` and assemble the returned layers."""
    s = cfg.modalities
    stem_conv = sink.conv('enc.stem.conv', cfg.stem_width, cfg.in_channels, 1, shared=cfg.shared_convs)
    stem_norm = sink.norm('enc.stem.bn', cfg.stem_width, encoder=True)
    stages = []
    in_c = cfg.stem_width
    for i, count in enumerate(cfg.blocks):
        blocks = []
        for j in range(count):
            bcfg = cfg.block_config(i, j, in_c)
            prefix = f"enc.stage{i + 1}.block{j + 1}"
            mid, out = bcfg.mid_channels, bcfg.out_channels
            layers = {
                'conv1': sink.conv(f"{prefix}.conv1", mid, in_c, 1, stride=bcfg.stride, shared=cfg.shared_convs),
                'bn1': sink.norm(f"{prefix}.bn1", mid, encoder=True),
                'conv2': sink.conv(f"{prefix}.conv2", mid, mid, 3, shared=cfg.shared_convs),
                'bn2': sink.norm(f"{prefix}.bn2", mid, encoder=True),
                'conv3': sink.conv(f"{prefix}.conv3", out, mid, 1, shared=cfg.shared_convs),
                'bn3': sink.norm(f"{prefix}.bn3", out, encoder=True),
            }
            if bcfg.projection:
                layers['proj'] = sink.conv(f"{prefix}.proj", out, in_c, 1, stride=bcfg.stride, shared=cfg.shared_convs)
                layers['proj_bn'] = sink.norm(f"{prefix}.proj_bn", out, encoder=True)
            if bcfg.is_fusion and bcfg.method == 'concat':
                layers['fuse'] = sink.conv(f"{prefix}.fuse", mid, 2 * mid, 1, bias=True, shared=cfg.shared_convs)
            if bcfg.is_fusion and bcfg.method == 'attention':
                shapes = attention_shapes(mid)
                layers['squeeze'] = sink.conv(f"{prefix}.attn_squeeze", shapes['squeeze_w'][0], 2 * mid, 1,
                                              bias=True, shared=cfg.shared_convs)
                layers['gate'] = sink.conv(f"{prefix}.attn_gate", 2 * mid, shapes['gate_w'][1], 1,
                                           bias=True, shared=cfg.shared_convs)
            blocks.append(FusionBlock(bcfg, layers, s))
            in_c = out
        stages.append(blocks)

    outs = [w * cfg.expansion for w in cfg.widths]
    ups = []
    d_c = outs[-1]
    for k, i in enumerate(reversed(range(len(outs) - 1))):
        ups.append((sink.conv(f"dec.up{k + 1}.conv", outs[i], d_c, 3, shared=True),
                    sink.norm(f"dec.up{k + 1}.bn", outs[i], encoder=False)))
        d_c = outs[i]
    classifier = sink.conv('dec.classifier', cfg.num_classes, d_c, 1, bias=True, shared=True,
                           init=cfg.classifier_init)
    ensemble = sink.ensemble(s)
    return (stem_conv, stem_norm), stages, Decoder(ups, classifier), ensemble


class ConvLayer:
    """Pointwise or 3x3 convolution with one weight per branch (possibly aliased)."""

    def __init__(self, weights, biases, stride, pad):
        self.weights = weights
        self.biases = biases
        self.stride = stride
        self.pad = pad

    def __call__(self, x, s):
        bias = self.biases[s].value if self.biases else None
        return conv2d(x, self.weights[s].value, bias, self.stride, self.pad)


class _Allocator:
    """Sink that allocates parameters (He-normal kernels, zero biases).

    Each kernel draws from a generator keyed by (seed, name), so adding or
    removing a layer leaves every other initial value unchanged.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.parameters = []
        self.norms = []

    def _init(self, name, shape, init):
        if init == 'zeros':
            return np.zeros(shape)
        rng = np.random.default_rng((self.cfg.seed, zlib.crc32(name.encode())))
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    def conv(self, name, cout, cin, k, stride=1, bias=False, shared=True, init='normal'):
        s = self.cfg.modalities
        suffixes = [''] if shared else [f".m{i}" for i in range(s)]
        shape = (cout, cin, k, k)
        weights = [Parameter(f"{name}.weight{sfx}", self._init(f"{name}.weight{sfx}", shape, init), CONV, decay=True)
                   for sfx in suffixes]
        biases = [Parameter(f"{name}.bias{sfx}", np.zeros(cout), BIAS) for sfx in suffixes] if bias else []
        for pair in zip(weights, biases or [None] * len(weights)):
            self.parameters.extend(p for p in pair if p is not None)
        if shared:
            weights, biases = weights * s, biases * s
        return ConvLayer(weights, biases, stride, (k - 1) // 2)

    def norm(self, name, channels, encoder):
        if encoder:
            norm = ModalityNorm(self.cfg.modalities, channels, self.cfg.encoder_norm_mode, name=name)
        else:
            norm = ModalityNorm(1, channels, SHARED, name=name)
        self.parameters.extend(norm.parameters())
        self.norms.append(norm)
        return norm

    def ensemble(self, s):
        head = EnsembleHead(s)
        self.parameters.append(head.logits)
        return head


class FusionBlock:
    """Bottleneck residual block; fuses branches when its config says so.

    Per branch: h = relu(bn1(conv1 x)), conv1 strided on downsampling blocks;
    shuffle(h); v = shift(h); g = relu(bn2(conv3x3 h)); g += v of the donor;
    shuffle(g); out = relu(bn3(conv1 g) + shortcut(x)).
    """

    def __init__(self, cfg, layers, num_modalities):
        self.cfg = cfg
        self.layers = layers
        self.receivers = receivers_for(cfg.direction, num_modalities) if cfg.is_fusion else ()

    def _norm(self, key, x, s, train):
        return self.layers[key].forward(x, s + 1, train)

    def _symmetric(self, own, donor, s):
        if self.cfg.method == 'average':
            return fuse_average(own, donor)
        if self.cfg.method == 'concat':
            return self.layers['fuse'](channel_concat(own, donor), s)
        squeeze, gate = self.layers['squeeze'], self.layers['gate']
        theta = {
            'squeeze_w': squeeze.weights[s].value, 'squeeze_b': squeeze.biases[s].value,
            'gate_w': gate.weights[s].value, 'gate_b': gate.biases[s].value,
        }
        return fuse_attention(own, donor, theta)

    def forward(self, xs, train):
        cfg, layers, recv = self.cfg, self.layers, self.receivers
        n = len(xs)
        h = [relu(self._norm('bn1', layers['conv1'](x, s), s, train)) for s, x in enumerate(xs)]
        if cfg.shuffle is not None:
            h = shuffle_ring(h, cfg.shuffle, recv)

        donated = None
        if recv and cfg.method == ASYM:
            if cfg.cross_skip_only:
                donated = list(h)
            elif cfg.shift is not None:
                donated = [pixel_shift(v, cfg.shift) for v in h]

        g = [relu(self._norm('bn2', layers['conv2'](v, s), s, train)) for s, v in enumerate(h)]
        if recv and (donated is not None or cfg.method != ASYM):
            fused = list(g)
            for s in recv:
                d = donor_of(s, n)
                fused[s] = add(g[s], donated[d]) if donated is not None else self._symmetric(g[s], g[d], s)
            g = fused
        if cfg.shuffle is not None:
            g = shuffle_ring(g, cfg.shuffle, recv)

        out = []
        for s, (v, x) in enumerate(zip(g, xs)):
            y = self._norm('bn3', layers['conv3'](v, s), s, train)
            shortcut = self._norm('proj_bn', layers['proj'](x, s), s, train) if cfg.projection else x
            out.append(relu(add(y, shortcut)))
        return out


class Decoder:
    """Upsample + 3x3 conv stages with one shared norm set, then a 1x1 classifier."""

    def __init__(self, ups, classifier):
        self.ups = ups
        self.classifier = classifier

    def forward(self, features, train):
        d = features[-1]
        for (conv, norm), skip in zip(self.ups, reversed(features[:-1])):
            d = relu(norm.forward(conv(resample(d), 0), 1, train))
            d = add(d, skip)
        return self.classifier(d, 0)


class EnsembleHead:
    """Importance scores alpha = softmax(w) over modality predictions."""

    def __init__(self, num_modalities):
        self.logits = Parameter('ensemble.logits', np.zeros(num_modalities), ENSEMBLE)

    def alpha(self):
        return softmax_vector(self.logits.value)


@dataclass
class MultimodalOutput:
    logits: list
    probs: list
    alpha: Tensor
    ensemble: Tensor
    features: list = field(repr=False, default_factory=list)


class AsymFusionNet:
    def __init__(self, cfg):
        self.cfg = cfg.validate()
        allocator = _Allocator(cfg)
        (self.stem_conv, self.stem_norm), self.stages, self.decoder, self.ensemble = walk(cfg, allocator)
        self._parameters = allocator.parameters
        self._norms = allocator.norms

    @property
    def num_modalities(self):
        return self.cfg.modalities

    def parameters(self):
        return list(self._parameters)

    def named_parameters(self):
        return {p.name: p for p in self._parameters}

    def norms(self):
        return list(self._norms)

    def buffers(self):
        named = {}
        for norm in self._norms:
            named.update(norm.buffers())
        return named

    def load_buffer(self, name, array):
        for norm in self._norms:
            if name.startswith(norm.name + '.'):
                norm.load_buffer(name, array)
                return
        raise KeyError(name)

    def encode(self, inputs, train):
        """Per-stage lists of branch features."""
        xs = [relu(self.stem_norm.forward(self.stem_conv(x, s), s + 1, train)) for s, x in enumerate(inputs)]
        features = []
        for blocks in self.stages:
            for block in blocks:
                xs = block.forward(xs, train)
            features.append(xs)
        return features

    def forward_multimodal(self, inputs, train=False):
        inputs = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
        if len(inputs) != self.num_modalities:
            raise DimensionError('modalities', self.num_modalities, len(inputs), 'forward_multimodal')
        for x in inputs[1:]:
            for axis in (0, 2, 3):
                if x.shape[axis] != inputs[0].shape[axis]:
                    raise DimensionError('NCHW'[axis], inputs[0].shape[axis], x.shape[axis], 'forward_multimodal')
        features = self.encode(inputs, train)
        logits = []
        for s in range(self.num_modalities):
            logits.append(self.decoder.forward([stage[s] for stage in features], train))
        probs = [softmax_channels(z) for z in logits]
        alpha = self.ensemble.alpha()
        return MultimodalOutput(logits, probs, alpha, mix(alpha, probs), features)


def build(cfg):
    net = AsymFusionNet(cfg)
    logger.debug("built network with %d parameter arrays", len(net.parameters()))
    return net


def forward_multimodal(net, inputs, mode='eval'):
    if mode not in ('train', 'eval'):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return net.forward_multimodal(inputs, train=mode == 'train')


def distillation_loss(output, labels, lam=config.DISTILL_LAMBDA, ignore_index=config.IGNORE_INDEX):
    """sum_s CE(logits_s) + lam * sum_s KL(ensemble || p_s) + CE(ensemble).

    The ensemble is a constant target inside the KL terms.
    """
    ce = [softmax_ce(z, labels, ignore_index)[1] for z in output.logits]
    target = stop_gradient(output.ensemble)
    kl = [kl_to_target(z, target, labels, ignore_index) for z in output.logits]
    ensemble_ce = nll_probs(output.ensemble, labels, ignore_index)
    total = sum_scalars(sum_scalars(*ce), scale(sum_scalars(*kl), lam), ensemble_ce)
    parts = {
        'ce': float(sum(t.item() for t in ce)),
        'kl': float(sum(t.item() for t in kl)),
        'ensemble_ce': ensemble_ce.item(),
        'total': total.item(),
    }
    return total, parts


def predict(net, inputs, batch_size=config.BATCH_SIZE):
    """Eval-mode argmax of the ensemble and of every modality."""
    inputs = [np.asarray(x) for x in inputs]
    count = inputs[0].shape[0]
    fused, single = [], [[] for _ in inputs]
    for start in range(0, count, batch_size):
        out = net.forward_multimodal([x[start:start + batch_size] for x in inputs], train=False)
        fused.append(out.ensemble.data.argmax(axis=1))
        for s, p in enumerate(out.probs):
            single[s].append(p.data.argmax(axis=1))
    return np.concatenate(fused), [np.concatenate(parts) for parts in single]


def branch_checksums(net, inputs):
    """md5 of every branch's encoder activations (eval mode)."""
    features = net.encode([Tensor(np.asarray(x)) for x in inputs], train=False)
    digests = []
    for s in range(net.num_modalities):
        hasher = hashlib.md5()
        for stage in features:
            hasher.update(np.ascontiguousarray(stage[s].data).tobytes())
        digests.append(hasher.hexdigest())
    return digests


def unfused(cfg):
    """Same architecture with every fusion switched off."""
    return replace(cfg, direction=NO_FUSION, shuffle=False, shift=False, cross_skip_only=False, method=ASYM)
