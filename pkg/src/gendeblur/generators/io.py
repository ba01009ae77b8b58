"""Container format for models and array datasets.

Layout of a container file::

    b"GDBC"                magic
    uint32 LE              format version
    uint64 LE              manifest length in bytes
    manifest               UTF-8 JSON
    blob                   little-endian float32, row-major

The manifest lists every array with its shape, byte offset and byte length
inside the blob.  Model manifests additionally carry the architecture.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from gendeblur.errors import ModelFormatError, ShapeError
from gendeblur.generators.layers import LayerSpec, init_weights
from gendeblur.generators.model import GeneratorModel

MAGIC = b"GDBC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def write_container(path, manifest, arrays):
    """Write ``arrays`` (name -> ndarray) with ``manifest`` to ``path``."""
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(manifest, format_version=VERSION, arrays=entries, blob_length=offset)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        for raw in chunks:
            fh.write(raw)
    return path


def read_container(path):
    """Return ``(manifest, arrays)``; raises :class:`ModelFormatError` on any inconsistency."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: file too short for header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    start = _HEADER.size
    if start + mlen > len(data):
        raise ModelFormatError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: malformed manifest ({exc})") from None
    if not isinstance(manifest, dict) or "arrays" not in manifest or "blob_length" not in manifest:
        raise ModelFormatError(f"{path}: manifest lacks array table")
    blob = data[start + mlen:]
    if len(blob) != manifest["blob_length"]:
        raise ModelFormatError(
            f"{path}: blob is {len(blob)} bytes but manifest declares {manifest['blob_length']}"
        )
    arrays = {}
    for e in manifest["arrays"]:
        try:
            shape = tuple(int(s) for s in e["shape"])
            off, length = int(e["offset"]), int(e["length"])
            name = e["name"]
        except (KeyError, TypeError, ValueError):
            raise ModelFormatError(f"{path}: malformed array entry {e!r}") from None
        if length != 4 * int(np.prod(shape)) or off < 0 or off + length > len(blob):
            raise ModelFormatError(f"{path}: array {name!r} length/offset inconsistent with blob")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=off).reshape(shape).astype(np.float32)
    return manifest, arrays


def save_model(model, path):
    manifest = {
        "type": "generator",
        "kind": model.kind,
        "latent_dim": model.latent_dim,
        "layers": [spec.to_json() for spec in model.layers],
        "output_shape": list(model.output_shape),
        "meta": model.meta,
    }
    return write_container(path, manifest, dict(model.weights))


def load_model(path):
    manifest, arrays = read_container(path)
    if manifest.get("type") != "generator":
        raise ModelFormatError(f"{path}: not a generator container")
    try:
        layers = tuple(LayerSpec.from_json(d) for d in manifest["layers"])
        model = GeneratorModel(
            int(manifest["latent_dim"]), layers, arrays, manifest.get("kind", "image"), manifest.get("meta", {})
        )
    except ShapeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from None
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: malformed manifest ({exc})") from None
    if list(model.output_shape) != list(manifest.get("output_shape", model.output_shape)):
        raise ModelFormatError(f"{path}: declared output shape does not match architecture")
    missing = _expected_weights(model) - set(arrays)
    if missing:
        raise ModelFormatError(f"{path}: missing weights {sorted(missing)}")
    return model


def _expected_weights(model):
    shapes = init_weights((model.latent_dim,), model.layers, np.random.default_rng(0))
    bad = [k for k, v in shapes.items() if k in model.weights and model.weights[k].shape != v.shape]
    if bad:
        raise ModelFormatError(f"weight shapes do not match architecture: {bad}")
    return set(shapes)
