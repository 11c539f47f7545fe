"""
Binary checkpoint format.

    b"SWIMCKPT" | u32 version | u64 header length | JSON header | tensor payloads

The header (UTF-8 JSON, sorted keys) carries the model kind, architecture
config, training metadata and a tensor directory of {name, dtype, shape,
offset, nbytes}; offsets are relative to the first payload byte and tensors
follow each other in directory order. All integers are little-endian.
"""
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from asad.errors import CheckpointError, ConfigError
from asad.models import SWCNNConfig, SWIMConfig, from_dict, to_dict

logger = logging.getLogger(__name__)

MAGIC = b'SWIMCKPT'
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
_PREFIX = struct.Struct('<8sIQ')
_DTYPES = {'float32': '<f4', 'float64': '<f8', 'int64': '<i8'}


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    tensors: OrderedDict
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, metadata=None):
        from asad.swim import SWIM
        if isinstance(model, SWIM):
            kind = 'swim'
            config = {'swcnn': to_dict(model.cnn.config), 'swim': to_dict(model.config)}
        else:
            kind = 'swcnn'
            config = {'swcnn': to_dict(model.config)}
        tensors = OrderedDict((name, np.array(value, copy=True)) for name, value in model.state_dict().items())
        return cls(kind, config, tensors, dict(metadata or {}))

    def swcnn_config(self):
        return from_dict(SWCNNConfig, self.config['swcnn'], 'checkpoint.swcnn')

    def swim_config(self):
        if 'swim' not in self.config:
            raise CheckpointError("checkpoint holds no SWIM configuration")
        return from_dict(SWIMConfig, self.config['swim'], 'checkpoint.swim')

    @property
    def in_channels(self):
        return int(self.config['swcnn']['in_channels'])

    def to_model(self):
        from asad.swcnn import SWCNN
        from asad.swim import SWIM
        try:
            if self.model_kind == 'swim':
                model = SWIM(self.swim_config(), self.swcnn_config())
            elif self.model_kind == 'swcnn':
                model = SWCNN(self.swcnn_config())
            else:
                raise CheckpointError(f"unknown model kind {self.model_kind!r}")
        except ConfigError as e:
            raise CheckpointError(f"checkpoint config is invalid: {e}") from e
        model.load_state_dict(self.tensors)
        return model


def _header(checkpoint):
    directory, offset = [], 0
    for name, value in checkpoint.tensors.items():
        dtype_name = np.dtype(value.dtype).name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {dtype_name}")
        nbytes = int(value.size * value.dtype.itemsize)
        directory.append({'name': name, 'dtype': dtype_name, 'shape': list(value.shape),
                          'offset': offset, 'nbytes': nbytes})
        offset += nbytes
    return {
        'model_kind': checkpoint.model_kind,
        'config': checkpoint.config,
        'metadata': checkpoint.metadata,
        'tensors': directory,
    }


def checkpoint_bytes(checkpoint):
    header = json.dumps(_header(checkpoint), sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [_PREFIX.pack(MAGIC, checkpoint.version, len(header)), header]
    for value in checkpoint.tensors.values():
        parts.append(np.ascontiguousarray(value, dtype=_DTYPES[np.dtype(value.dtype).name]).tobytes())
    return b''.join(parts)


def save_checkpoint(model_or_checkpoint, path, metadata=None):
    """Write a model (or an existing Checkpoint) and return the Checkpoint written."""
    checkpoint = model_or_checkpoint
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.from_model(model_or_checkpoint, metadata)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(checkpoint_bytes(checkpoint))
    logger.info(f"Saved {checkpoint.model_kind} checkpoint ({len(checkpoint.tensors)} tensors) to {path}")
    return checkpoint


def parse_checkpoint(blob, source='<bytes>'):
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes {magic!r}")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(f"{source}: unknown checkpoint version {version}")
    start = _PREFIX.size
    if start + header_len > len(blob):
        raise CheckpointError(f"{source}: header of {header_len} bytes is truncated")
    try:
        header = json.loads(blob[start:start + header_len].decode('utf-8'))
        directory = header['tensors']
        kind, config = header['model_kind'], header['config']
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header ({e})") from e

    payload = memoryview(blob)[start + header_len:]
    tensors = OrderedDict()
    expected_offset = 0
    for entry in directory:
        name = entry.get('name', '?')
        try:
            dtype = np.dtype(_DTYPES[entry['dtype']])
            shape = tuple(int(s) for s in entry['shape'])
            offset, nbytes = int(entry['offset']), int(entry['nbytes'])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{source}: tensor {name}: bad directory entry ({e})") from e
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize or offset != expected_offset:
            raise CheckpointError(f"{source}: tensor {name}: shape {shape} does not match {nbytes} bytes at offset {offset}")
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{source}: tensor {name} is truncated "
                                  f"(needs {offset + nbytes} payload bytes, file has {len(payload)})")
        array = np.frombuffer(payload[offset:offset + nbytes], dtype=dtype).reshape(shape)
        tensors[name] = array.astype(dtype.newbyteorder('='), copy=True)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - expected_offset} unexpected trailing bytes")
    return Checkpoint(kind, config, tensors, header.get('metadata', {}), version)


def load_checkpoint(path):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()
    checkpoint = parse_checkpoint(blob, path)
    logger.debug(f"Loaded {checkpoint.model_kind} checkpoint from {path}")
    return checkpoint


def load_model(path):
    return load_checkpoint(path).to_model()
