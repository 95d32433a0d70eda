"""Binary checkpoint format.

Layout::

    b"LSHG" | version byte (1) | u64 LE manifest length | UTF-8 JSON manifest
    | zero padding | tensor data

The manifest holds the network config and one entry per array
(``name``, ``shape``, ``dtype``, ``offset``), sorted by name. Offsets are
relative to the start of the data section, which itself begins on a
64-byte boundary; every tensor starts on a 64-byte boundary and is stored
little-endian in C order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CompatibilityError, FormatError
from .hourglass import NetworkConfig, StackedHourglass, build_network

MAGIC = b"LSHG"
VERSION = 1
ALIGN = 64


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def encode(state: Dict[str, np.ndarray], config: NetworkConfig) -> bytes:
    entries, offset = [], 0
    names = sorted(state)
    for name in names:
        arr = state[name]
        dtype = np.dtype(arr.dtype).newbyteorder("<")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
        offset = _align(offset + arr.size * dtype.itemsize)
    manifest = json.dumps({"config": config.to_dict(), "tensors": entries}, sort_keys=True).encode("utf-8")
    header = MAGIC + bytes([VERSION]) + struct.pack("<Q", len(manifest)) + manifest
    data_start = _align(len(header))
    buf = bytearray(data_start + offset)
    buf[:len(header)] = header
    for entry, name in zip(entries, names):
        raw = np.ascontiguousarray(state[name], dtype=np.dtype(entry["dtype"])).tobytes()
        start = data_start + entry["offset"]
        buf[start:start + len(raw)] = raw
    return bytes(buf)


def decode(blob: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise FormatError("not an LSHG checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {blob[4]}")
    (length,) = struct.unpack("<Q", blob[5:13])
    if 13 + length > len(blob):
        raise FormatError("checkpoint truncated inside the manifest")
    try:
        manifest = json.loads(blob[13:13 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc
    data_start = _align(13 + length)
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = data_start + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise FormatError(f"checkpoint truncated in tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=start).reshape(entry["shape"])
        state[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    return manifest, state


def save_checkpoint(net: StackedHourglass, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(net.state(), net.config))
    return path


def read_manifest(path) -> dict:
    return decode(Path(path).read_bytes())[0]


def load_checkpoint(path, config: Optional[NetworkConfig] = None) -> StackedHourglass:
    """Rebuilds the network stored at ``path``.

    When ``config`` is given, every manifest config key must match it.
    """
    manifest, state = decode(Path(path).read_bytes())
    stored = manifest["config"]
    if config is not None:
        wanted = config.to_dict()
        for key in sorted(set(stored) | set(wanted)):
            if stored.get(key) != wanted.get(key):
                raise CompatibilityError(
                    f"checkpoint config mismatch on {key!r}: file has {stored.get(key)!r}, "
                    f"expected {wanted.get(key)!r}")
    cfg = NetworkConfig.from_dict(stored)
    net = build_network(cfg, seed=None)
    dtypes = {a.dtype for a in state.values()}
    if len(dtypes) == 1:
        net.astype(dtypes.pop())
    missing = set(net.state()) - set(state)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    net.load_state(state)
    return net
