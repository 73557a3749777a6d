"""Binary container for checkpoints, episode dumps, and sample batches.

Layout (little-endian)::

    b"VDET" | u32 version | u32 n_sections
    per section: 4-byte tag | u64 payload length | payload | u32 CRC32(payload)

Sections: ``CONF`` config text, ``VOCB`` vocabulary text, ``TENS`` parameter
table, ``OPTM`` optimizer table (optional), ``RNGS`` generator state (JSON),
``EXTR`` any other tensor table (bank, layout, samples).

A tensor table is ``u32 count`` then per tensor: ``u32 name_len | name |
u8 dtype (0=f32, 1=f64, 2=i64) | u32 ndim | u64 dims[ndim] | row-major data``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config_text
from .model import ModelConfig, ModelParams
from .numcore import Tensor
from .vocab import Vocabulary

__all__ = [
    "MAGIC",
    "VERSION",
    "CheckpointError",
    "BadMagicError",
    "VersionError",
    "TruncatedError",
    "ChecksumError",
    "ShapeMismatchError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "write_container",
    "read_container",
    "encode_table",
    "decode_table",
]

MAGIC = b"VDET"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def encode_table(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_table(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, ndim = r.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(size * dt.itemsize), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes in tensor table")
    return out


def write_container(sections: list[tuple[bytes, bytes]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for tag, payload in sections:
        if len(tag) != 4:
            raise ValueError("section tags are 4 bytes")
        buf.write(tag)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
        buf.write(struct.pack("<I", zlib.crc32(payload)))
    return buf.getvalue()


def read_container(data: bytes) -> dict[bytes, bytes]:
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise BadMagicError("not a VDET container")
    version, n = r.unpack("<II")
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    sections: dict[bytes, bytes] = {}
    for _ in range(n):
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch in section {tag.decode('ascii', 'replace')}")
        if tag in sections:
            raise CheckpointError(f"duplicate section {tag.decode('ascii', 'replace')}")
        sections[tag] = payload
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last section")
    return sections


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocabulary
    params: ModelParams
    opt_state: dict[str, np.ndarray] | None = None
    rng_state: dict | None = None
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def _rng_json(state: dict | None) -> bytes:
    def plain(o):
        return o.tolist() if isinstance(o, np.ndarray) else int(o)

    return json.dumps(state, sort_keys=True, default=plain).encode("utf-8")


def checkpoint_bytes(params: ModelParams, config: RunConfig, vocab: Vocabulary | None = None,
                     opt_state: dict[str, np.ndarray] | None = None, rng_state: dict | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> bytes:
    vocab = vocab or Vocabulary.standard()
    sections = [
        (b"CONF", config.to_text().encode("utf-8")),
        (b"VOCB", vocab.to_text().encode("utf-8")),
        (b"TENS", encode_table({k: t.data for k, t in params.tensors.items()})),
    ]
    if opt_state is not None:
        sections.append((b"OPTM", encode_table(opt_state)))
    if rng_state is not None:
        sections.append((b"RNGS", _rng_json(rng_state)))
    if extra:
        sections.append((b"EXTR", encode_table(extra)))
    return write_container(sections)


def save_checkpoint(path, params: ModelParams, config: RunConfig, vocab: Vocabulary | None = None,
                    opt_state: dict[str, np.ndarray] | None = None, rng_state: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    data = checkpoint_bytes(params, config, vocab, opt_state, rng_state, extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    with_shapes = ModelParams.init(cfg, seed=0, dtype=np.float32)
    return {k: t.shape for k, t in with_shapes.tensors.items()}


def load_checkpoint(path, model_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``model_config`` (if given) must match the stored tensors."""
    sections = read_container(Path(path).read_bytes())
    for tag in (b"CONF", b"VOCB", b"TENS"):
        if tag not in sections:
            raise CheckpointError(f"missing section {tag.decode()}")
    unknown = set(sections) - {b"CONF", b"VOCB", b"TENS", b"OPTM", b"RNGS", b"EXTR"}
    if unknown:
        raise CheckpointError(f"unknown sections {sorted(t.decode('ascii', 'replace') for t in unknown)}")
    config = parse_config_text(sections[b"CONF"].decode("utf-8"), source=f"{path}:CONF")
    vocab = Vocabulary.from_text(sections[b"VOCB"].decode("utf-8"))
    table = decode_table(sections[b"TENS"])
    target = model_config or config.model
    expected = _expected_shapes(target)
    if set(expected) != set(table):
        raise ShapeMismatchError(f"tensor names differ: missing {sorted(set(expected) - set(table))}, "
                                 f"unexpected {sorted(set(table) - set(expected))}")
    for name, shape in expected.items():
        if table[name].shape != shape:
            raise ShapeMismatchError(f"{name}: stored {table[name].shape}, config expects {shape}")
    tensors = {name: Tensor(table[name], requires_grad=True, name=name) for name in expected}
    params = ModelParams(target, tensors)
    opt = decode_table(sections[b"OPTM"]) if b"OPTM" in sections else None
    rng = json.loads(sections[b"RNGS"].decode("utf-8")) if b"RNGS" in sections else None
    extra = decode_table(sections[b"EXTR"]) if b"EXTR" in sections else {}
    return Checkpoint(config, vocab, params, opt, rng, extra)
