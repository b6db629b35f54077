"""DPEC1 named-tensor container.

Layout::

    b"DPEC1" | u64 LE manifest length | UTF-8 JSON manifest | float32 LE payloads

Every array is stored as contiguous little-endian float32. Offsets in the
manifest are relative to the first payload byte.
"""
import json
import struct

import numpy as np

from .errors import ContainerCorruptionError, ContainerFormatError, DimensionError

MAGIC = b"DPEC1"
_DTYPE = np.dtype("<f4")
_LEN = struct.Struct("<Q")


def _as_f32(name, value):
    arr = np.asarray(value)
    if hasattr(value, "detach"):
        arr = value.detach().cpu().numpy()
    arr = np.require(arr, dtype=_DTYPE, requirements="C")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"array {name!r} contains non-finite values")
    return arr


def save_container(arrays, path, provenance="", meta=None):
    """Write a mapping ``name -> array`` to ``path``.

    ``meta`` is an optional JSON-serializable block stored verbatim in the
    manifest (checkpoints keep their config there).
    """
    entries = []
    blobs = []
    offset = 0
    for name, value in arrays.items():
        arr = _as_f32(name, value)
        nbytes = arr.size * _DTYPE.itemsize
        entries.append({"name": str(name), "shape": list(arr.shape),
                        "dtype": "float32-le", "offset": offset, "nbytes": nbytes})
        blobs.append(arr.tobytes(order="C"))
        offset += nbytes
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise DimensionError("array names must be unique within a container")
    manifest = {"format": "DPEC1", "provenance": provenance, "arrays": entries,
                "meta": meta or {}}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_manifest(path):
    with open(path, "rb") as fh:
        manifest, _ = _read(fh.read(), path)
    return manifest


def _read(raw, path):
    if raw[:len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    start = len(MAGIC) + _LEN.size
    if len(raw) < start:
        raise ContainerCorruptionError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack(raw[len(MAGIC):start])
    if len(raw) < start + hlen:
        raise ContainerCorruptionError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerCorruptionError(f"{path}: unreadable manifest ({exc})") from exc
    return manifest, raw[start + hlen:]


def load_container(path, with_meta=False):
    """Read a container back into ``{name: float32 ndarray}``.

    Raises ContainerFormatError on a wrong magic tag and
    ContainerCorruptionError when declared shapes do not match the payload.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    manifest, payload = _read(raw, path)
    out = {}
    expected_total = 0
    for entry in manifest.get("arrays", []):
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _DTYPE.itemsize
        if entry.get("nbytes", nbytes) != nbytes:
            raise ContainerCorruptionError(
                f"{path}: array {name!r} declares shape {shape} but {entry['nbytes']} bytes")
        off = entry["offset"]
        if off < 0 or off + nbytes > len(payload):
            raise ContainerCorruptionError(
                f"{path}: array {name!r} ({count} floats) overruns the "
                f"{len(payload) // _DTYPE.itemsize}-float payload")
        if name in out:
            raise ContainerCorruptionError(f"{path}: duplicate array name {name!r}")
        out[name] = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=off).reshape(shape).copy()
        expected_total += nbytes
    if expected_total != len(payload):
        raise ContainerCorruptionError(
            f"{path}: manifest declares {expected_total} payload bytes, found {len(payload)}")
    if with_meta:
        return out, manifest
    return out
