"""JSON-manifest + raw float32 blob container.

File layout::

    b"VLFB"                       4-byte magic
    uint32 little-endian          manifest length in bytes
    manifest                      UTF-8 JSON object
    payload                       little-endian float32 blobs, row-major

The manifest always carries ``kind``, ``version`` and ``blobs``, a list of
``{"name", "shape", "offset", "nbytes"}`` with offsets relative to the start
of the payload.  Blobs are contiguous, in manifest order, and the payload
length must equal the sum of their sizes.  Feature files and model
checkpoints both use this container.
"""

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VLFB"
_HEADER = struct.Struct("<4sI")


class ContainerError(Exception):
    code = "E_CONTAINER"


class ManifestError(ContainerError):
    code = "E_MANIFEST"


class VersionMismatchError(ContainerError):
    code = "E_VERSION"


class TruncatedPayloadError(ContainerError):
    code = "E_TRUNCATED"


class ShapeInconsistencyError(ContainerError):
    code = "E_SHAPE"


def write_container(path, kind: str, version: int, meta: dict, blobs) -> None:
    arrays = [(name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in blobs]
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    manifest = dict(meta, kind=kind, version=version, blobs=entries)
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(raw)))
        fh.write(raw)
        for _, arr in arrays:
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_manifest(fh, kind: str, version: int) -> dict:
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than header")
    magic, n = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ManifestError(f"bad magic {magic!r}")
    raw = fh.read(n)
    if len(raw) < n:
        raise TruncatedPayloadError("manifest truncated")
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("kind") != kind:
        raise ManifestError(f"expected kind {kind!r}, found {manifest.get('kind')!r}")
    if manifest.get("version") != version:
        raise VersionMismatchError(
            f"{kind} version {manifest.get('version')!r} unsupported (want {version})")
    offset = 0
    for b in manifest.get("blobs", []):
        expect = int(np.prod(b["shape"], dtype=np.int64)) * 4
        if b["nbytes"] != expect or b["offset"] != offset:
            raise ShapeInconsistencyError(
                f"blob {b['name']!r}: shape {b['shape']} does not match "
                f"offset/nbytes {b['offset']}/{b['nbytes']}")
        offset += b["nbytes"]
    manifest["_payload_bytes"] = offset
    manifest["_payload_start"] = _HEADER.size + n
    return manifest


def read_container(path, kind: str, version: int):
    """Return ``(manifest, {name: float32 array})``; nothing partial on failure."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        manifest = read_manifest(fh, kind, version)
        want = manifest.pop("_payload_bytes")
        start = manifest.pop("_payload_start")
        have = size - start
        if have < want:
            raise TruncatedPayloadError(f"payload has {have} bytes, manifest needs {want}")
        if have > want:
            raise ShapeInconsistencyError(f"payload has {have - want} trailing bytes")
        payload = fh.read(want)
    arrays = {}
    for b in manifest["blobs"]:
        chunk = payload[b["offset"]:b["offset"] + b["nbytes"]]
        arrays[b["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(b["shape"]).copy()
    return manifest, arrays
