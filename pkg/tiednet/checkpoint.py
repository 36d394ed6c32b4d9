"""
Binary checkpoints.

Layout (all integers little-endian):

    header  "PECK" | u32 version (1) | u64 record count
            | u32 config-JSON length | ModelConfig JSON
    record  u32 name length | UTF-8 name | u8 dtype (0 f32, 1 f64)
            | u8 ndim | u64 dims[ndim] | raw row-major data

One record per DISTINCT Parameter (a tied matrix is stored once under its
own name), one per batch-norm buffer, and one per optimizer slot buffer
("optim/<slot>/<parameter>"). A saved train state adds one more record,
"train_state/meta": its JSON fields as UTF-8 bytes, one byte value per f32
element. Tying is not stored: loading rebuilds the model from the config
echo, which re-creates the tied references, and then fills the values in.
"""
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar, Dict

import numpy as np
from pydantic import ValidationError

from .config import ModelConfig
from .errors import CheckpointFormatError, CheckpointIntegrityError, DTypeError, ShapeError
from .logger import get_logger
from .optim import TrainState
from .zoo import build_model

logger = get_logger(__name__)

MAGIC = b'PECK'
VERSION = 1
SLOT_PREFIX = 'optim/'
META_RECORD = 'train_state/meta'

DTYPE_CODES = {np.dtype('<f4'): 0, np.dtype('<f8'): 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


@dataclass
class CheckpointLayout:
    # Fields with ClassVar are the fixed-size segments of the format.
    magic_version: ClassVar[struct.Struct] = struct.Struct('<4sI')
    record_count: ClassVar[struct.Struct] = struct.Struct('<Q')
    json_length: ClassVar[struct.Struct] = struct.Struct('<I')
    name_length: ClassVar[struct.Struct] = struct.Struct('<I')
    dtype_ndim: ClassVar[struct.Struct] = struct.Struct('<BB')
    dim: ClassVar[struct.Struct] = struct.Struct('<Q')


def _encode_record(name, array):
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder('<')
    if dtype not in DTYPE_CODES:
        raise CheckpointIntegrityError(f'record {name!r} has unsupported dtype {array.dtype}')
    encoded = name.encode('utf-8')
    parts = [
        CheckpointLayout.name_length.pack(len(encoded)),
        encoded,
        CheckpointLayout.dtype_ndim.pack(DTYPE_CODES[dtype], array.ndim),
    ]
    parts.extend(CheckpointLayout.dim.pack(extent) for extent in array.shape)
    parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b''.join(parts)


def _records(model, state):
    for name, param in model.named_parameters():
        yield name, param.data
    yield from model.named_buffers()
    if state is not None:
        yield META_RECORD, _encode_meta(state.meta())
        for slot in sorted(state.slots):
            for name, array in state.slots[slot].items():
                yield f'{SLOT_PREFIX}{slot}/{name}', array


def _encode_meta(meta):
    text = json.dumps(meta, sort_keys=True, separators=(',', ':'))
    return np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype('<f4')


def _decode_meta(array):
    if array.ndim != 1 or not np.all((array >= 0) & (array <= 255) & (array == np.floor(array))):
        raise CheckpointIntegrityError(f'record {META_RECORD!r} does not hold byte values')
    try:
        return json.loads(array.astype(np.uint8).tobytes().decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f'record {META_RECORD!r} is not UTF-8 JSON: {exc}') from exc


def checkpoint_bytes(model, state=None):
    """Serialises `model` (and optionally `state`) to checkpoint bytes."""
    header = model.config.to_json().encode('utf-8')
    records = [_encode_record(name, array) for name, array in _records(model, state)]
    return b''.join([
        CheckpointLayout.magic_version.pack(MAGIC, VERSION),
        CheckpointLayout.record_count.pack(len(records)),
        CheckpointLayout.json_length.pack(len(header)),
        header,
        *records,
    ])


def save_checkpoint(model, state, path):
    """
    Writes a checkpoint atomically (temporary file, then rename).

    Args:
        model (Model): The model to save.
        state (TrainState | None): Optimizer state to save alongside.
        path (str | Path): Destination.
    """
    path = Path(path)
    payload = checkpoint_bytes(model, state)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.info(f'Saved checkpoint {path} ({len(payload):,} bytes)')


class _Reader:
    def __init__(self, payload):
        self.payload = payload
        self.offset = 0

    def take(self, size, what):
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointIntegrityError(
                f'checkpoint truncated while reading {what} at byte {self.offset}'
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, layout, what):
        return layout.unpack(self.take(layout.size, what))


def parse_checkpoint(payload):
    """
    Decodes checkpoint bytes without touching any model.

    Returns:
        tuple: (config dict from the header, {record name: array}).

    Raises:
        CheckpointFormatError: Bad magic or unsupported version.
        CheckpointIntegrityError: Truncated or inconsistent content.
    """
    if len(payload) < CheckpointLayout.magic_version.size:
        raise CheckpointFormatError('file is too short to be a checkpoint')
    reader = _Reader(payload)
    magic, version = reader.unpack(CheckpointLayout.magic_version, 'header')
    if magic != MAGIC:
        raise CheckpointFormatError(f'bad magic {magic!r}; expected {MAGIC!r}')
    if version != VERSION:
        raise CheckpointFormatError(f'unsupported checkpoint version {version}')

    (count,) = reader.unpack(CheckpointLayout.record_count, 'record count')
    (length,) = reader.unpack(CheckpointLayout.json_length, 'config length')
    try:
        header = json.loads(reader.take(length, 'config JSON').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f'checkpoint config is not UTF-8 JSON: {exc}') from exc
    if not isinstance(header, dict):
        raise CheckpointIntegrityError('checkpoint config is not a JSON object')

    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack(CheckpointLayout.name_length, 'record name length')
        name = reader.take(name_length, 'record name').decode('utf-8', errors='replace')
        code, ndim = reader.unpack(CheckpointLayout.dtype_ndim, f'record {name!r}')
        if code not in CODE_DTYPES:
            raise CheckpointIntegrityError(f'record {name!r} has unknown dtype code {code}')
        dims = tuple(
            reader.unpack(CheckpointLayout.dim, f'dims of {name!r}')[0] for _ in range(ndim)
        )
        dtype = CODE_DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f'data of {name!r}')
        if name in records:
            raise CheckpointIntegrityError(f'duplicate record {name!r}')
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()

    if reader.offset != len(payload):
        raise CheckpointIntegrityError(
            f'{len(payload) - reader.offset} trailing bytes after {count} records'
        )
    return header, records


def _restore(model, records):
    """Copies record values into `model`; validates everything first."""
    targets = [(name, param.data) for name, param in model.named_parameters()]
    targets.extend(model.named_buffers())
    for name, array in targets:
        if name not in records:
            raise ShapeError(f'checkpoint has no record for {name!r}')
        if records[name].shape != array.shape:
            raise ShapeError(
                f'record {name!r} has dims {records[name].shape}, model expects {array.shape}'
            )
        if records[name].dtype != array.dtype:
            raise DTypeError(
                f'record {name!r} is {records[name].dtype}, model expects {array.dtype}'
            )
    for name, array in targets:
        array[...] = records[name]


def _train_state(records):
    if META_RECORD not in records:
        return None
    meta = _decode_meta(records[META_RECORD])
    slots = {}
    for name, array in records.items():
        if name.startswith(SLOT_PREFIX):
            slot, _, param_name = name[len(SLOT_PREFIX):].partition('/')
            slots.setdefault(slot, {})[param_name] = array
    return TrainState.from_meta(meta, slots)


def _read(path):
    return Path(path).read_bytes()


def load_checkpoint(path):
    """
    Rebuilds the saved model (tying re-created from the config echo) and
    its train state.

    Returns:
        tuple: (Model, TrainState | None).
    """
    header, records = parse_checkpoint(_read(path))
    try:
        cfg = ModelConfig.model_validate(header)
    except ValidationError as exc:
        raise CheckpointIntegrityError(f'checkpoint config echo is invalid: {exc}') from exc
    model = build_model(cfg, seed=0)
    _restore(model, records)
    return model, _train_state(records)


def load_into(model, path):
    """
    Loads checkpoint values into an existing model.

    Returns:
        TrainState | None: The saved train state.

    Raises:
        ShapeError: If the checkpoint does not match the model's structure.
    """
    _, records = parse_checkpoint(_read(path))
    state = _train_state(records)
    _restore(model, records)
    return state
