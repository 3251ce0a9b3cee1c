"""Portable weight file (``.spurw``).

Layout::

    0..8        magic b"SPURW001"
    8..12       u32 LE manifest length L
    12..12+L    UTF-8 JSON {"arch", "config", "tensors": [{"name", "shape", "offset"}]}
    12+L..      payload: little-endian float32 tensors at the declared byte offsets
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagic, ManifestMismatch, TruncatedPayload
from .nn import ModelConfig, WeightStore, param_shapes

MAGIC = b"SPURW001"
_F32 = np.dtype("<f4")


def save_weights(store: WeightStore) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in store.tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"arch": store.cfg.arch, "config": store.cfg.to_dict(), "tensors": entries}
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def load_weights(data: bytes, expect_arch: Optional[str] = None) -> WeightStore:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a SPURW001 weight file")
    if len(data) < 12:
        raise TruncatedPayload("file ends inside the manifest length")
    (m_len,) = struct.unpack_from("<I", data, 8)
    if 12 + m_len > len(data):
        raise TruncatedPayload("file ends inside the manifest")
    try:
        manifest = json.loads(data[12:12 + m_len].decode("utf-8"))
        cfg = ModelConfig.from_dict(manifest["config"])
        arch = manifest["arch"]
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ManifestMismatch(f"unreadable manifest: {exc}") from exc
    if arch != cfg.arch:
        raise ManifestMismatch(f"manifest arch {arch!r} disagrees with config arch {cfg.arch!r}")
    if expect_arch is not None and arch != expect_arch:
        raise ManifestMismatch(f"weights are for {arch!r}, expected {expect_arch!r}")

    expected = param_shapes(cfg)
    names = [e.get("name") for e in entries]
    if names != list(expected):
        raise ManifestMismatch(f"tensor names {names} != {list(expected)}")

    payload = memoryview(data)[12 + m_len:]
    tensors = OrderedDict()
    for e in entries:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise ManifestMismatch(f"{e['name']}: declared shape {shape} != {expected[e['name']]} for this config")
        n_bytes = int(np.prod(shape)) * _F32.itemsize
        off = int(e["offset"])
        if off < 0 or off + n_bytes > len(payload):
            raise TruncatedPayload(f"{e['name']} runs past end of payload")
        arr = np.frombuffer(payload[off:off + n_bytes], dtype=_F32).reshape(shape)
        tensors[e["name"]] = arr.astype(np.float32)
    return WeightStore(cfg, tensors)


def read_weights(path, expect_arch: Optional[str] = None) -> WeightStore:
    return load_weights(Path(path).read_bytes(), expect_arch)


def write_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(save_weights(store))
