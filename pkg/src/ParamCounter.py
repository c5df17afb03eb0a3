"""Exact parameter accounting from the architecture walk, without allocation."""
import logging
from dataclasses import asdict, dataclass, replace

from Network import NetConfig, walk
from FusionOps import NO_FUSION

logger = logging.getLogger(__name__)

# Unimodal RefineNet-101 size, the overhead reference for the resnet101-shape preset
REFINENET101_TOTAL = 118_100_000

PRESETS = {
    'toy': (NetConfig(widths=(16, 32, 64, 128), blocks=(1, 1, 1, 1), expansion=4, stem_width=16), None),
    'resnet101-shape': (NetConfig(in_channels=3, num_classes=40, stem_width=64, widths=(64, 128, 256, 512),
                                  blocks=(3, 4, 23, 3), expansion=4), REFINENET101_TOTAL),
}


@dataclass
class ParamReport:
    modalities: int
    conv: int
    encoder_conv: int
    encoder_norm_set: int
    encoder_norm_sets: int
    decoder_norm: int
    ensemble: int
    total: int
    buffers: int
    unimodal_total: int
    baseline_total: int
    overhead: float

    @property
    def extra_norm_per_modality(self):
        return self.encoder_norm_set

    def to_record(self):
        record = asdict(self)
        record['extra_norm_per_modality'] = self.extra_norm_per_modality
        return record


class _Counter:
    """Sink that tallies what ``walk`` would allocate."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.conv_params = 0
        self.encoder_conv_params = 0
        self.encoder_channels = 0
        self.decoder_channels = 0
        self.ensemble_params = 0

    def conv(self, name, cout, cin, k, stride=1, bias=False, shared=True, init='normal'):
        copies = 1 if shared else self.cfg.modalities
        size = copies * (cout * cin * k * k + (cout if bias else 0))
        self.conv_params += size
        if name.startswith('enc.'):
            self.encoder_conv_params += size

    def norm(self, name, channels, encoder):
        if encoder:
            self.encoder_channels += channels
        else:
            self.decoder_channels += channels

    def ensemble(self, s):
        self.ensemble_params += s


def _tally(cfg):
    counter = _Counter(cfg)
    walk(cfg, counter)
    return counter


def count_params(net_or_cfg, baseline_total=None):
    """Learnable parameter breakdown; running statistics are reported apart as buffers."""
    cfg = getattr(net_or_cfg, 'cfg', net_or_cfg).validate()
    tally = _tally(cfg)
    sets = 1 if cfg.encoder_norm_mode == 'shared' else cfg.modalities
    norm_set = 2 * tally.encoder_channels
    decoder = 2 * tally.decoder_channels
    total = tally.conv_params + sets * norm_set + decoder + tally.ensemble_params
    buffers = sets * norm_set + decoder

    if cfg.modalities == 1:
        unimodal = total
    else:
        unimodal = count_params(replace(cfg, modalities=1, direction=NO_FUSION)).total
    baseline = baseline_total or unimodal
    return ParamReport(
        modalities=cfg.modalities,
        conv=tally.conv_params,
        encoder_conv=tally.encoder_conv_params,
        encoder_norm_set=norm_set,
        encoder_norm_sets=sets,
        decoder_norm=decoder,
        ensemble=tally.ensemble_params,
        total=total,
        buffers=buffers,
        unimodal_total=unimodal,
        baseline_total=baseline,
        overhead=(total - unimodal) / baseline,
    )


def preset(name, modalities=2):
    """(config, reference unimodal size or None) for a named layer table."""
    cfg, reference = PRESETS[name]
    return replace(cfg, modalities=modalities), reference
