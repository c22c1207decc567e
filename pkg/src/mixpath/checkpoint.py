"""Binary checkpoint container.

Layout (little-endian)::

    b"MXPT" | version u32 | count u32 |
    count x { name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 payload }

Entries are written in sorted name order so identical states give identical
bytes. Metadata (fingerprints, config hash) rides along as a JSON blob stored
in a rank-1 entry named ``__meta__`` whose f32 payload holds the UTF-8 bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MXPT"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    """The file is not a valid checkpoint or does not match the network."""


def _entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"entry name too long: {name[:40]}...")
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim > 255:
        raise CheckpointError("rank above 255")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(arrays: dict, meta: dict | None = None) -> bytes:
    items = sorted(arrays.items())
    if meta is not None:
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        items.append((META_KEY, blob.astype(np.float32)))
    out = [MAGIC, struct.pack("<II", VERSION, len(items))]
    out += [_entry(name, arr) for name, arr in items]
    return b"".join(out)


def loads(buf: bytes) -> tuple:
    """Parse a checkpoint; returns ``(arrays, meta)``."""
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic, not an MXPT checkpoint")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        arrays, meta = {}, None
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(view):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
            if name == META_KEY:
                meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            elif name in arrays:
                raise CheckpointError(f"duplicate entry {name!r}")
            else:
                arrays[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return arrays, meta


def save(path, arrays: dict, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, meta))


def load(path) -> tuple:
    with open(path, "rb") as fh:
        return loads(fh.read())


def save_supernet(path, net, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("space", net.spec.to_dict())
    meta.setdefault("sbn_mode", net.sbn_mode)
    save(path, net.state_dict(), meta)


def load_supernet(path, seed: int = 0):
    """Rebuild a supernet from a checkpoint written by :func:`save_supernet`."""
    from .space import SearchSpaceSpec
    from .supernet import Supernet

    arrays, meta = load(path)
    if not meta or "space" not in meta:
        raise CheckpointError("checkpoint carries no search-space description")
    spec = SearchSpaceSpec.from_dict(meta["space"])
    net = Supernet(spec, seed)
    try:
        net.load_state_dict(arrays)
    except KeyError as exc:
        raise CheckpointError(str(exc)) from None
    return net, meta
