"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"LFCK" | version | config byte length | config (UTF-8 "key=value" lines)
    then, per parameter sorted by name:
    name length | name (UTF-8) | rank | dims... | float32 LE data
"""
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, from_mapping, parse_key_values, to_lines
from .errors import CheckpointError, ConfigMismatchError, TruncationError, VersionError
from .tensor import Tensor

MAGIC = b"LFCK"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")


def encode(model):
    chunks = [MAGIC, _U32.pack(FORMAT_VERSION)]
    cfg = "\n".join(to_lines(model.config)).encode("utf-8")
    chunks += [_U32.pack(len(cfg)), cfg]
    for name in sorted(model.params):
        data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(data.ndim)]
        chunks += [_U32.pack(n) for n in data.shape]
        chunks.append(data.tobytes())
    return b"".join(chunks)


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model))
    return path


class _Reader:
    def __init__(self, blob, source):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise TruncationError(
                f"{self.source}: truncated while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    @property
    def done(self):
        return self.pos == len(self.blob)


def decode(blob, source="<bytes>", expected=None):
    """Rebuild a model from checkpoint bytes.

    ``expected`` (a :class:`ModelConfig`) makes any differing field fail with
    :class:`ConfigMismatchError`.
    """
    from .model import LightFormer

    r = _Reader(blob, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise VersionError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    cfg_text = r.take(r.u32("config length"), "config").decode("utf-8")
    config = from_mapping(ModelConfig, parse_key_values(cfg_text, source))
    if expected is not None:
        for key, want in vars(expected).items():
            got = getattr(config, key)
            if got != want:
                raise ConfigMismatchError(key, got, want)

    reference = LightFormer(config).params
    params = {}
    while not r.done:
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = tuple(r.u32(f"shape of {name}") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        if name not in reference:
            raise CheckpointError(f"{source}: unknown parameter {name!r}")
        if shape != reference[name].shape:
            raise CheckpointError(
                f"{source}: parameter {name!r} has shape {shape}, config implies "
                f"{reference[name].shape}")
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, dtype=np.float32)
    missing = sorted(set(reference) - set(params))
    if missing:
        raise CheckpointError(f"{source}: missing parameters {missing[:5]}")
    return LightFormer(config, params, dtype=np.float32)


def load_checkpoint(path, expected=None):
    path = Path(path)
    return decode(path.read_bytes(), str(path), expected)
