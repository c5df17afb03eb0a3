"""Binary export of synthetic splits.

Layout, all little-endian:
    magic b'ASYF' | u32 version | u32 H | u32 W | u32 K | u32 S | u32 count
    f32 inputs[count][S][H][W]
    u8  labels[count][H][W]
"""
import logging
import struct

import numpy as np

from Errors import IntegrityError
from SynthData import SynthSplit

logger = logging.getLogger(__name__)

MAGIC = b'ASYF'
VERSION = 1
HEADER = struct.Struct('<4s6I')


class DatasetStorage:
    def __init__(self, path):
        self.path = path

    def save(self, split, num_classes):
        count, modalities, height, width = split.inputs.shape
        with open(self.path, 'wb') as f:
            f.write(HEADER.pack(MAGIC, VERSION, height, width, num_classes, modalities, count))
            f.write(np.ascontiguousarray(split.inputs, dtype='<f4').tobytes())
            f.write(np.ascontiguousarray(split.labels, dtype=np.uint8).tobytes())
        logger.info("wrote %d samples to %s", count, self.path)

    def load(self):
        """(split, header dict)."""
        try:
            with open(self.path, 'rb') as f:
                blob = f.read()
        except OSError as e:
            raise IntegrityError('dataset', f"cannot read {self.path}: {e}") from e
        if len(blob) < HEADER.size:
            raise IntegrityError('header', f"{self.path} is shorter than the {HEADER.size}-byte header")
        magic, version, height, width, num_classes, modalities, count = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise IntegrityError('header', f"bad magic {magic!r}")
        if version != VERSION:
            raise IntegrityError('header', f"unsupported version {version}")

        n_inputs = count * modalities * height * width
        n_labels = count * height * width
        expected = HEADER.size + 4 * n_inputs + n_labels
        if len(blob) != expected:
            tensor = 'inputs' if len(blob) < HEADER.size + 4 * n_inputs else 'labels'
            raise IntegrityError(tensor, f"payload is {len(blob)} bytes, expected {expected}")
        inputs = np.frombuffer(blob, dtype='<f4', count=n_inputs, offset=HEADER.size)
        labels = np.frombuffer(blob, dtype=np.uint8, count=n_labels, offset=HEADER.size + 4 * n_inputs)
        if labels.size and labels.max() >= num_classes:
            raise IntegrityError('labels', f"label {labels.max()} outside 0..{num_classes - 1}")
        split = SynthSplit(inputs.reshape(count, modalities, height, width).astype(np.float32),
                           labels.reshape(count, height, width).copy())
        header = {'height': height, 'width': width, 'num_classes': num_classes,
                  'modalities': modalities, 'count': count, 'version': version}
        return split, header


def write_dataset(path, split, num_classes):
    DatasetStorage(path).save(split, num_classes)


def load_dataset(path):
    return DatasetStorage(path).load()
