#!/usr/bin/env python3
"""
DCML STORAGE v1.0.0
===================
Binary tensor files (TNS1), parameter checkpoints (DCK1) and the dataset
directory layout. Everything is little-endian.

TNS1:  b'TNS1' | u8 rank | rank x u32 dims | prod(dims) x f32 values
DCK1:  b'DCK1' | u32 entry count | per entry:
       u16 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 payload
===================
"""

import json
import struct
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Any, Union

import numpy as np

try:
    from .dcml_shared import FormatError, atomic_write_bytes, atomic_write_json
except ImportError:
    from dcml_shared import FormatError, atomic_write_bytes, atomic_write_json

logger = logging.getLogger(__name__)

TNS_MAGIC = b'TNS1'
DCK_MAGIC = b'DCK1'
META_FILE = "meta.json"
IMAGE_DIR = "images"

# ============= TNS1 =============
def _pack_array(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim > 255:
        raise FormatError("rank does not fit in u8", rank=array.ndim)
    header = struct.pack('<B', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape)
    return header + np.ascontiguousarray(array, dtype='<f4').tobytes()

def _unpack_array(buf: memoryview, offset: int) -> Tuple[np.ndarray, int]:
    try:
        rank, = struct.unpack_from('<B', buf, offset)
        offset += 1
        dims = struct.unpack_from(f'<{rank}I', buf, offset)
        offset += 4 * rank
    except struct.error:
        raise FormatError("truncated tensor header", offset=offset)
    count = int(np.prod(dims)) if rank else 1
    end = offset + 4 * count
    if end > len(buf):
        raise FormatError("truncated tensor payload", expected=count, offset=offset)
    values = np.frombuffer(buf[offset:end], dtype='<f4').reshape(dims)
    return values.astype(np.float32), end

def encode_tns(array: np.ndarray) -> bytes:
    return TNS_MAGIC + _pack_array(array)

def decode_tns(payload: bytes) -> np.ndarray:
    if payload[:4] != TNS_MAGIC:
        raise FormatError("not a TNS1 file", magic=payload[:4])
    array, end = _unpack_array(memoryview(payload), 4)
    if end != len(payload):
        raise FormatError("trailing bytes after TNS1 payload", extra=len(payload) - end)
    return array

def save_tns(path: Path, array: np.ndarray):
    atomic_write_bytes(path, encode_tns(array))

def load_tns(path: Path) -> np.ndarray:
    return decode_tns(Path(path).read_bytes())

# ============= DCK1 =============
def encode_checkpoint(params: Dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays in insertion order"""
    parts = [DCK_MAGIC, struct.pack('<I', len(params))]
    for name, array in params.items():
        raw = name.encode('utf-8')
        if len(raw) > 0xFFFF:
            raise FormatError("parameter name too long", name=name[:40])
        parts.append(struct.pack('<H', len(raw)) + raw)
        parts.append(_pack_array(array))
    return b''.join(parts)

def decode_checkpoint(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != DCK_MAGIC:
        raise FormatError("not a DCK1 checkpoint", magic=payload[:4])
    buf = memoryview(payload)
    try:
        count, = struct.unpack_from('<I', buf, 4)
    except struct.error:
        raise FormatError("truncated checkpoint header")
    offset = 8
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            length, = struct.unpack_from('<H', buf, offset)
        except struct.error:
            raise FormatError("truncated checkpoint entry", offset=offset)
        offset += 2
        raw = bytes(buf[offset:offset + length])
        if len(raw) != length:
            raise FormatError("truncated parameter name", offset=offset)
        try:
            name = raw.decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError("parameter name is not UTF-8", offset=offset, reason=str(e))
        offset += length
        params[name], offset = _unpack_array(buf, offset)
    if offset != len(payload):
        raise FormatError("trailing bytes after DCK1 entries", extra=len(payload) - offset)
    return params

def save_checkpoint(path: Path, params: Dict[str, np.ndarray]):
    atomic_write_bytes(path, encode_checkpoint(params))
    logger.info(f"[CKPT] Saved {len(params)} tensors to {path}")

def load_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())

# ============= DATASET DIRECTORY =============
def save_dataset_dir(out_dir: Path, samples: List[Any], extra_meta: Dict[str, Any]):
    """meta.json with per-sample annotations plus one TNS1 image per sample"""
    out_dir = Path(out_dir)
    (out_dir / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    records = []
    for index, sample in enumerate(samples):
        file_name = f"{IMAGE_DIR}/{index:05d}.tns"
        save_tns(out_dir / file_name, sample.image)
        record = sample.annotations()
        record['file'] = file_name
        records.append(record)
    meta = dict(extra_meta)
    meta['samples'] = records
    atomic_write_json(out_dir / META_FILE, meta)
    logger.info(f"[DATA] Wrote {len(records)} samples to {out_dir}")

def load_dataset_meta(data_dir: Path) -> Dict[str, Any]:
    try:
        with open(Path(data_dir) / META_FILE, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise FormatError("dataset directory has no meta.json", path=str(data_dir))
