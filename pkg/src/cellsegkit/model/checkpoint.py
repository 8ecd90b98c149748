"""Binary checkpoint format.

    b"CSKP"  u32 version
    u32 n    then n tensor records (parameters followed by buffers)
    u32 m    then m optimizer-state records

A record is u16 name length, UTF-8 name, u8 rank, rank x u32 dims and the
float32 payload, all little-endian.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CSKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_record(name, arr):
    arr = np.asarray(arr)
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF or arr.ndim > 0xFF:
        raise CheckpointError(f"cannot encode tensor {name!r}")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pack_section(tensors):
    return struct.pack("<I", len(tensors)) + b"".join(_pack_record(k, v) for k, v in tensors.items())


def encode(tensors, opt_tensors=None):
    return MAGIC + struct.pack("<I", VERSION) + _pack_section(tensors) + _pack_section(opt_tensors or {})


def _read_section(raw, pos, path):
    def need(n):
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")

    need(4)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out = {}
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(nlen + 1)
        name = raw[pos:pos + nlen].decode("utf-8")
        rank = raw[pos + nlen]
        pos += nlen + 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        out[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return out, pos


def decode(raw, path="<bytes>"):
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not a CSKP checkpoint")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors, pos = _read_section(raw, 8, path)
    opt, pos = _read_section(raw, pos, path)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors, opt


def save(path, store, optimizer=None):
    tensors = dict(store.params)
    tensors.update(store.buffers)
    opt = optimizer.state_tensors() if optimizer is not None else {}
    Path(path).write_bytes(encode(tensors, opt))


def read(path):
    return decode(Path(path).read_bytes(), path)


def load_into(path, store, optimizer=None):
    """Copy checkpoint tensors into ``store`` (and ``optimizer`` if given)."""
    tensors, opt = read(path)
    expected = set(store.params) | set(store.buffers)
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise CheckpointError(f"{path}: tensor names do not match model (missing {missing}, unexpected {extra})")
    for name, arr in tensors.items():
        dst = store.params[name] if name in store.params else store.buffers[name]
        if dst.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arr.shape} vs {dst.shape}")
        dst[...] = arr
    if optimizer is not None:
        if not opt:
            raise CheckpointError(f"{path}: checkpoint has no optimizer state")
        optimizer.load_state_tensors(opt)
    return tensors, opt
