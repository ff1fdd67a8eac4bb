"""The FCNT weight file.

Layout (little-endian)::

    b"FCNT"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
                float32 payload in row-major order

Tensors are written in the canonical order of
:func:`fusioncount.model.parameter_manifest`: encoder convs conv1_1..conv5_3,
fusion blocks 1-4 (expand, bottleneck), reduction blocks reduce4, reduce3,
reduce2 (dilated1, dilated2, pointwise as present), then the head; weight
before bias for each conv.
"""
import struct

import numpy as np

from .model import parameter_manifest

MAGIC = b"FCNT"
VERSION = 1


class WeightFormatError(ValueError):
    """The file is truncated or is not an FCNT file."""


class WeightMismatchError(ValueError):
    """The file's tensors do not match the active model configuration."""


def dumps(params, config):
    manifest = parameter_manifest(config)
    out = [MAGIC, struct.pack("<II", VERSION, len(manifest))]
    for name, shape in manifest:
        if name not in params:
            raise WeightMismatchError(f"missing tensor {name!r}")
        arr = np.asarray(params[name])
        if tuple(arr.shape) != shape:
            raise WeightMismatchError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_weights(path, params, config):
    with open(path, "wb") as fh:
        fh.write(dumps(params, config))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"file truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf, config):
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise WeightFormatError("not an FCNT weight file (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise WeightFormatError(f"unsupported FCNT version {version}")
    expected = dict(parameter_manifest(config))
    params = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor {i} name is not valid UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        if name not in expected:
            raise WeightMismatchError(f"unknown tensor {name!r} for this model configuration")
        if name in params:
            raise WeightMismatchError(f"duplicate tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise WeightMismatchError(f"tensor {name!r} has dims {tuple(dims)}, "
                                      f"the configuration needs {expected[name]}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * size, f"data of {name!r}")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    missing = [n for n in expected if n not in params]
    if missing:
        raise WeightMismatchError(f"missing tensor {missing[0]!r}"
                                  + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    return {name: params[name] for name in expected}


def load_weights(path, config):
    with open(path, "rb") as fh:
        return loads(fh.read(), config)
