"""Binary model file: JSON manifest followed by a raw float64 payload.

Layout::

    8 bytes   magic  b"SBMODEL\\x00"
    u32 LE    format version
    u64 LE    manifest length in bytes
    manifest  UTF-8 JSON, keys sorted
    payload   little-endian float64 tensors, back to back

Each manifest tensor entry carries ``name``, ``shape``, ``offset`` and
``nbytes`` (both in bytes, relative to the payload start); the entries tile
the payload exactly. The manifest also records the architecture, the seed
and free-form training provenance.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .core import atomic_write
from .network import Network, build_network

MAGIC = b"SBMODEL\x00"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


class ModelFormatError(ValueError):
    pass


def dumps(network: Network, seed: int | None = None, provenance: dict | None = None) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in network.state_dict().items():
        data = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": network.spec(),
        "tensors": tensors,
        "seed": seed,
        "provenance": provenance or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def loads(buf: bytes):
    """Return ``(network, manifest)`` from model-file bytes."""
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, head_len = struct.unpack("<IQ", buf[8:20])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    if 20 + head_len > len(buf):
        raise ModelFormatError("manifest runs past end of file")
    try:
        manifest = json.loads(buf[20 : 20 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable manifest: {exc}") from None
    if manifest.get("format_version") != version:
        raise ModelFormatError("manifest version disagrees with file header")
    payload = buf[20 + head_len :]
    state = {}
    pos = 0
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != pos or entry["nbytes"] != 8 * n:
            raise ModelFormatError(f"tensor {entry['name']!r} does not tile the payload at byte {pos}")
        if pos + entry["nbytes"] > len(payload):
            raise ModelFormatError(f"payload truncated: tensor {entry['name']!r} ends past byte {len(payload)}")
        state[entry["name"]] = np.frombuffer(payload, dtype=_LE_F64, count=n, offset=pos).astype(np.float64).reshape(entry["shape"])
        pos += entry["nbytes"]
    if pos != len(payload):
        raise ModelFormatError(f"payload has {len(payload) - pos} bytes not covered by the manifest")
    net = build_network(manifest["architecture"])
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ModelFormatError(str(exc)) from None
    return net, manifest


def save_model(path, network: Network, seed=None, provenance=None):
    atomic_write(path, dumps(network, seed, provenance))


def load_model(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
