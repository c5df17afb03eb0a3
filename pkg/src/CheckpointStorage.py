"""Checkpoint files: a JSON manifest next to one contiguous little-endian payload.

Parameters, norm running statistics and optimizer velocities are written as
float64 so a reload reproduces every array bit for bit.
"""
import hashlib
import json
import logging
import os

import numpy as np

from Errors import IntegrityError
from Network import NetConfig, build
from Optimizer import SGD

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PAYLOAD_FILE = 'checkpoint.bin'
MANIFEST_FILE = 'checkpoint.manifest.json'
DTYPE = '<f8'

PARAM, BUFFER, VELOCITY = 'param', 'buffer', 'velocity'


class CheckpointStorage:
    def __init__(self, directory):
        self.directory = directory
        self.payload_path = os.path.join(directory, PAYLOAD_FILE)
        self.manifest_path = os.path.join(directory, MANIFEST_FILE)

    def compute_hash(self, data):
        """Compute an MD5 hash for the given data."""
        hasher = hashlib.md5()
        hasher.update(data)
        return hasher.hexdigest()

    @staticmethod
    def _entries(net, optimizer):
        for p in net.parameters():
            yield p.name, PARAM, p.value.data
        for name, array in net.buffers().items():
            yield name, BUFFER, array
        for name, array in optimizer.state().items():
            yield name, VELOCITY, array

    def save(self, net, optimizer):
        os.makedirs(self.directory, exist_ok=True)
        tensors = []
        chunks = []
        offset = 0
        for name, kind, array in self._entries(net, optimizer):
            blob = np.ascontiguousarray(array, dtype=DTYPE).tobytes()
            tensors.append({'name': name, 'kind': kind, 'shape': list(np.shape(array)),
                            'dtype': DTYPE, 'offset': offset, 'nbytes': len(blob)})
            chunks.append(blob)
            offset += len(blob)
        payload = b''.join(chunks)
        manifest = {
            'version': FORMAT_VERSION,
            'net_config': net.cfg.to_dict(),
            'optimizer': optimizer.settings(),
            'tensors': tensors,
            'payload_bytes': len(payload),
            'payload_md5': self.compute_hash(payload),
        }
        with open(self.payload_path, 'wb') as f:
            f.write(payload)
        with open(self.manifest_path, 'w') as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info("saved %d tensors (%d bytes) to %s", len(tensors), len(payload), self.directory)
        return manifest

    def read_manifest(self):
        try:
            with open(self.manifest_path) as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise IntegrityError('manifest', f"cannot read {self.manifest_path}: {e}") from e
        if manifest.get('version') != FORMAT_VERSION:
            raise IntegrityError('manifest', f"unsupported format version {manifest.get('version')!r}")
        return manifest

    def _arrays(self, manifest):
        try:
            with open(self.payload_path, 'rb') as f:
                payload = f.read()
        except OSError as e:
            raise IntegrityError('payload', f"cannot read {self.payload_path}: {e}") from e
        arrays = {}
        for entry in manifest['tensors']:
            name = entry['name']
            if entry['dtype'] != DTYPE:
                raise IntegrityError(name, f"unsupported dtype {entry['dtype']}")
            count = int(np.prod(entry['shape'], dtype=np.int64))
            if entry['nbytes'] != 8 * count:
                raise IntegrityError(name, f"{entry['nbytes']} bytes do not match shape {entry['shape']}")
            end = entry['offset'] + entry['nbytes']
            if entry['offset'] < 0 or end > len(payload):
                raise IntegrityError(name, f"bytes {entry['offset']}..{end} lie outside the "
                                           f"{len(payload)}-byte payload")
            arrays[name] = (entry['kind'], np.frombuffer(payload, dtype=DTYPE, count=count,
                                                         offset=entry['offset']).reshape(entry['shape']))
        if len(payload) != manifest['payload_bytes']:
            raise IntegrityError('payload', f"{len(payload)} bytes, manifest says {manifest['payload_bytes']}")
        if self.compute_hash(payload) != manifest['payload_md5']:
            raise IntegrityError('payload', "md5 digest mismatch")
        return arrays

    def load(self):
        """(net, optimizer) rebuilt from the manifest and restored from the payload."""
        manifest = self.read_manifest()
        net = build(NetConfig.from_dict(manifest['net_config']))
        arrays = self._arrays(manifest)

        params = net.named_parameters()
        buffers = net.buffers()
        for name, (kind, array) in arrays.items():
            if kind == PARAM:
                if name not in params:
                    raise IntegrityError(name, "not a parameter of the configured network")
                if array.shape != params[name].shape:
                    raise IntegrityError(name, f"shape {array.shape}, expected {params[name].shape}")
                params[name].assign(array)
            elif kind == BUFFER:
                if name not in buffers:
                    raise IntegrityError(name, "not a buffer of the configured network")
                net.load_buffer(name, array)
        for name in list(params) + list(buffers):
            if name not in arrays:
                raise IntegrityError(name, "missing from checkpoint")

        settings = manifest['optimizer']
        optimizer = SGD(net.parameters(), lr=settings['lr'], momentum=settings['momentum'],
                        weight_decay=settings['weight_decay'])
        optimizer.load_state({name: a for name, (kind, a) in arrays.items() if kind == VELOCITY}, settings)
        logger.info("loaded checkpoint from %s (step %d)", self.directory, optimizer.step_count)
        return net, optimizer


def save_checkpoint(net, optimizer, path):
    return CheckpointStorage(path).save(net, optimizer)


def load_checkpoint(path):
    return CheckpointStorage(path).load()
