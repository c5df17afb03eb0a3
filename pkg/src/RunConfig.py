"""Run configuration: network, data and optimizer settings in one JSON document.

Values resolve as: command-line override > JSON file > environment/.env > default.
Overrides use dotted keys, e.g. ``--net.direction 2to1 --optim.lr 0.05``.
"""
import json
from dataclasses import dataclass, field, fields

from Config import config
from Errors import ConfigError
from Network import NetConfig
from SynthData import SynthConfig
from Trainer import OptimConfig

SECTIONS = {'net': NetConfig, 'data': SynthConfig, 'optim': OptimConfig}


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = config.SEED
    out: str = config.OUT

    def validate(self):
        self.net.validate()
        self.data.validate()
        self.optim.validate()
        if self.net.modalities != self.data.modalities:
            raise ConfigError(f"net.modalities {self.net.modalities} != data.modalities {self.data.modalities}")
        if self.net.num_classes != self.data.num_classes:
            raise ConfigError(f"net.num_classes {self.net.num_classes} != data.num_classes {self.data.num_classes}")
        return self

    def to_dict(self):
        return {'net': self.net.to_dict(), 'data': self.data.to_dict(), 'optim': self.optim.to_dict(),
                'seed': self.seed, 'out': self.out}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(SECTIONS) - {'seed', 'out'}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, section in SECTIONS.items():
            if name in data:
                _check_keys(section, data[name], name)
                kwargs[name] = section.from_dict(data[name])
        for key in ('seed', 'out'):
            if key in data:
                kwargs[key] = data[key]
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def apply_overrides(self, pairs):
        """Apply ``[(dotted_key, text), ...]`` in order."""
        for key, text in pairs:
            section, _, name = key.partition('.')
            if not name:
                if section not in ('seed', 'out'):
                    raise ConfigError(f"unknown option --{key}")
                setattr(self, section, int(text) if section == 'seed' else text)
                continue
            if section not in SECTIONS:
                raise ConfigError(f"unknown option --{key}")
            target = getattr(self, section)
            if name not in {f.name for f in fields(target)}:
                raise ConfigError(f"unknown option --{key}")
            setattr(target, name, _parse(text, getattr(target, name), key))
            if hasattr(target, '__post_init__'):
                target.__post_init__()
        return self


def _check_keys(section, data, name):
    known = {f.name for f in fields(section)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(sorted(unknown))}")


def _parse(text, current, key):
    try:
        if isinstance(current, bool):
            if text.lower() in ('true', '1', 'yes', 'on'):
                return True
            if text.lower() in ('false', '0', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if current is None or text.lstrip().startswith('['):
            return json.loads(text)
        if isinstance(current, tuple):
            return tuple(float(v) if '.' in v else int(v) for v in text.split(','))
        return text
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"--{key}: cannot parse {text!r}") from e


def parse_override_args(tokens):
    """Turn ``['--net.direction', '2to1', ...]`` into key/value pairs."""
    pairs = []
    it = iter(tokens)
    for token in it:
        if not token.startswith('--'):
            raise ConfigError(f"expected --key value, got {token!r}")
        key = token[2:]
        if '=' in key:
            key, value = key.split('=', 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"--{key} needs a value")
        pairs.append((key, value))
    return pairs
