"""
Checkpoint persistence.

Binary layout, all integers little-endian::

    b"CRAM" | u32 version | u32 length + UTF-8 JSON metadata |
    per tensor: u32 length + UTF-8 name | u8 dtype (0=f64, 1=f32) |
                u8 rank | u64 dims... | raw values

Parameters are stored under their own names, batch-norm running statistics
as ``bn_state.<layer>.running_mean`` / ``running_var``. Prunability flags,
tags, configs and run metadata travel in the JSON block.
"""
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from cramkit import variables
from cramkit.errors import FormatError
from cramkit.model import MLP, BNLayerState, BNState, ModelConfig
from cramkit.optimizers import OptimizerConfig
from cramkit.params import ParamEntry, ParamSet
from cramkit.tensor import Tensor

__all__ = ['Checkpoint', 'save_checkpoint', 'load_checkpoint', 'atomic_write']

_DTYPES = {variables.DTYPE_F64: np.dtype('<f8'), variables.DTYPE_F32: np.dtype('<f4')}
_HEADER_KEYS = ('model_config', 'optimizer_config', 'entries', 'bn', 'tensors', 'float32', 'metadata')


@dataclass
class Checkpoint:
    """
    A trained (or compressed) model with the context it came from.

    Attributes:
        model_config (ModelConfig): Architecture
        params (ParamSet): Parameter values, flags and tags
        bn_state (BNState): Batch-norm running statistics
        optimizer_config (OptimizerConfig, optional): Optimizer snapshot
        metadata (dict): JSON-serializable run information (seed, step,
            dataset fingerprint, library version, ...)
    """

    model_config: ModelConfig
    params: ParamSet
    bn_state: BNState
    optimizer_config: OptimizerConfig = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, optimizer_config=None, metadata=None):
        meta = {'library_version': variables.LIBRARY_VERSION}
        meta.update(metadata or {})
        return cls(model.config, model.params, model.bn_state.copy(), optimizer_config, meta)

    def model(self):
        """
        Returns:
            MLP: Model over these parameters with a private copy of the
            batch-norm state
        """
        return MLP(self.model_config, self.params, self.bn_state.copy())

    def replace(self, params=None, bn_state=None, metadata=None):
        meta = dict(self.metadata)
        meta.update(metadata or {})
        return Checkpoint(
            self.model_config,
            self.params if params is None else params,
            (self.bn_state if bn_state is None else bn_state).copy(),
            self.optimizer_config,
            meta,
        )

    def equal(self, other):
        return self.params.equal(other.params) and self.bn_state.equal(other.bn_state)


def atomic_write(path, data):
    """
    Writes ``data`` (bytes or str) to a temporary file next to ``path`` and
    renames it into place.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    if isinstance(data, str):
        data = data.encode('utf-8')
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _tensors(checkpoint):
    for entry in checkpoint.params:
        yield entry.name, entry.tensor.data
    for i, layer in enumerate(checkpoint.bn_state.layers):
        yield 'bn_state.{}.running_mean'.format(i), layer.running_mean
        yield 'bn_state.{}.running_var'.format(i), layer.running_var


def _header(checkpoint, float32):
    return {
        'model_config': checkpoint.model_config.to_dict(),
        'optimizer_config': None if checkpoint.optimizer_config is None else checkpoint.optimizer_config.to_dict(),
        'entries': [
            {'name': e.name, 'prunable': e.prunable, 'tags': sorted(e.tags)} for e in checkpoint.params
        ],
        'bn': {
            'momentum': checkpoint.bn_state.momentum,
            'eps': checkpoint.bn_state.eps,
            'num_batches_tracked': [layer.num_batches_tracked for layer in checkpoint.bn_state.layers],
        },
        'tensors': [{'name': name, 'shape': list(values.shape)} for name, values in _tensors(checkpoint)],
        'float32': bool(float32),
        'metadata': checkpoint.metadata,
    }


def _pack_str(text):
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def save_checkpoint(checkpoint, path, float32=False):
    """
    Serializes ``checkpoint`` to ``path`` atomically.

    Args:
        checkpoint (Checkpoint): What to save
        path (str): Target file
        float32 (bool): Store values as 32-bit floats; flagged in the
            metadata and cast back to 64 bits on load
    """
    code = variables.DTYPE_F32 if float32 else variables.DTYPE_F64
    chunks = [
        variables.CHECKPOINT_MAGIC,
        struct.pack('<I', variables.CHECKPOINT_VERSION),
        _pack_str(json.dumps(_header(checkpoint, float32), sort_keys=True)),
    ]
    for name, values in _tensors(checkpoint):
        chunks.append(_pack_str(name))
        chunks.append(struct.pack('<BB', code, values.ndim))
        chunks.append(struct.pack('<{}Q'.format(values.ndim), *values.shape))
        chunks.append(np.ascontiguousarray(values, dtype=_DTYPES[code]).tobytes())
    atomic_write(path, b''.join(chunks))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.buf):
            raise FormatError('truncated while reading {}'.format(what), offset=self.offset)
        chunk = self.buf[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what):
        (length,) = self.unpack('<I', what + ' length')
        start = self.offset
        try:
            return self.take(length, what).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError('{} is not valid UTF-8'.format(what), offset=start)

    @property
    def done(self):
        return self.offset == len(self.buf)


def _read_tensor(reader):
    name = reader.string('tensor name')
    start = reader.offset
    code, rank = reader.unpack('<BB', 'dtype and rank of ' + name)
    if code not in _DTYPES:
        raise FormatError('{}: unknown dtype code {}'.format(name, code), offset=start)
    dims = reader.unpack('<{}Q'.format(rank), 'dims of ' + name)
    count = math.prod(dims)
    raw = reader.take(count * _DTYPES[code].itemsize, 'values of ' + name)
    values = np.frombuffer(raw, dtype=_DTYPES[code]).astype(np.float64).reshape(dims)
    return name, values, start


def load_checkpoint(path):
    """
    Reads a checkpoint written by :func:`save_checkpoint`.

    Raises:
        FormatError: Bad magic or version, truncation, or tensors that do
            not match the recorded shapes
        OSError: Unreadable file

    Returns:
        Checkpoint: Loaded checkpoint; batch-norm state in tracking mode
    """
    with open(path, 'rb') as f:
        reader = _Reader(f.read())
    magic = reader.take(4, 'magic')
    if magic != variables.CHECKPOINT_MAGIC:
        raise FormatError('bad magic {!r}, expected {!r}'.format(magic, variables.CHECKPOINT_MAGIC), offset=0)
    (version,) = reader.unpack('<I', 'format version')
    if version != variables.CHECKPOINT_VERSION:
        raise FormatError('unsupported format version {}'.format(version), offset=4)
    meta_offset = reader.offset
    try:
        header = json.loads(reader.string('metadata'))
    except json.JSONDecodeError as e:
        raise FormatError('metadata is not valid JSON: {}'.format(e.msg), offset=meta_offset)
    missing = [key for key in _HEADER_KEYS if key not in header]
    if missing:
        raise FormatError('metadata lacks {}'.format(', '.join(missing)), offset=meta_offset)
    tensors = {}
    for expected in header['tensors']:
        name, values, start = _read_tensor(reader)
        if name != expected['name'] or list(values.shape) != expected['shape']:
            raise FormatError('tensor {} {} does not match recorded {} {}'.format(
                name, list(values.shape), expected['name'], expected['shape']), offset=start)
        tensors[name] = values
    if not reader.done:
        raise FormatError('{} trailing bytes'.format(len(reader.buf) - reader.offset), offset=reader.offset)

    entries = [
        ParamEntry(e['name'], Tensor(tensors[e['name']], requires_grad=True), e['prunable'], frozenset(e['tags']))
        for e in header['entries']
    ]
    bn = header['bn']
    layers = [
        BNLayerState(
            np.array(tensors['bn_state.{}.running_mean'.format(i)]),
            np.array(tensors['bn_state.{}.running_var'.format(i)]),
            tracked,
        )
        for i, tracked in enumerate(bn['num_batches_tracked'])
    ]
    optimizer = header['optimizer_config']
    return Checkpoint(
        ModelConfig.from_dict(header['model_config']),
        ParamSet(entries),
        BNState(layers, bn['momentum'], bn['eps']),
        None if optimizer is None else OptimizerConfig.from_dict(optimizer),
        dict(header['metadata'], float32=header['float32']) if header['float32'] else header['metadata'],
    )
