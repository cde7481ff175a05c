"""Model files: a JSON header followed by little-endian float64 blobs.

Layout::

    b"RKNMODEL\\n" | uint64 header length (LE) | UTF-8 JSON header | array bytes

The header lists every hyperparameter and, for each array, its byte offset
and shape.  Gram caches are not stored; they are recomputed on load from the
stored motifs, ``alpha`` and ``epsilon``.  Writing the same model twice gives
identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .core import AnchorSet, PoolingMode, RknModel
from .exceptions import ModelFormatError
from .io import atomic_write_bytes
from .oracle import GapWeighting

__all__ = ["FORMAT_VERSION", "save_model", "load_model", "model_to_bytes", "model_from_bytes", "model_hash"]

FORMAT_VERSION = 1
MAGIC = b"RKNMODEL\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def model_to_bytes(model: RknModel) -> bytes:
    arrays = {}
    layers = []
    for n, layer in enumerate(model.layers):
        arrays[f"Z{n}"] = layer.Z
        layers.append({
            "k": layer.k, "q": layer.q, "dim": layer.dim,
            "alpha": layer.alpha, "lambda": layer.lam, "weighting": layer.weighting.mode,
            "epsilon": layer.epsilon, "layer_index": layer.layer_index,
        })
    scalar_bias = np.ndim(model.bias) == 0
    for name in ("W", "feat_mean", "feat_std"):
        value = getattr(model, name)
        if value is not None:
            arrays[name] = np.asarray(value)
    arrays["bias"] = np.atleast_1d(np.asarray(model.bias, dtype=np.float64))
    index, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        index[name] = {"offset": offset, "shape": list(data.shape)}
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_id": model.encoder_id,
        "task": model.task,
        "layers": layers,
        "pooling": {"kind": model.pooling.kind, "gamma": model.pooling.gamma},
        "scalar_bias": scalar_bias,
        "arrays": index,
        "provenance": _jsonable(model.provenance),
    }
    head = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def model_from_bytes(payload: bytes) -> RknModel:
    if not payload.startswith(MAGIC):
        raise ModelFormatError("not a model file (bad magic)")
    try:
        (size,) = struct.unpack_from("<Q", payload, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(payload[start:start + size].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"unreadable model header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is not supported (expected {FORMAT_VERSION})")
    body = payload[start + size:]

    def array(name):
        if name not in header["arrays"]:
            return None
        entry = header["arrays"][name]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] + 8 * count > len(body):
            raise ModelFormatError(f"array {name!r} runs past the end of the file")
        flat = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        return flat.astype(np.float64).reshape(entry["shape"])

    try:
        layers = [
            AnchorSet(array(f"Z{n}"), spec["alpha"], GapWeighting(spec["weighting"], spec["lambda"]),
                      spec["epsilon"], spec["layer_index"])
            for n, spec in enumerate(header["layers"])
        ]
        bias = array("bias")
        model = RknModel(
            layers,
            PoolingMode(header["pooling"]["kind"], header["pooling"]["gamma"]),
            W=array("W"),
            bias=float(bias[0]) if header["scalar_bias"] else bias,
            feat_mean=array("feat_mean"),
            feat_std=array("feat_std"),
            encoder_id=header["encoder_id"],
            task=header["task"],
            provenance=header["provenance"],
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"incomplete model header: {exc}") from None
    return model


def save_model(model: RknModel, path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> RknModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def model_hash(model: RknModel) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()
