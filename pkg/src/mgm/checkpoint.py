"""Checkpoint container: a zip holding ``header.json`` plus one MGMT raster
per tensor. Nested state (module/optimizer state dicts, rng states) is stored
as JSON with tensors replaced by references, preserving key and container
types so that a restored optimizer is indistinguishable from the original."""

import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .raster import decode_raster, encode_raster

FORMAT = "mgm-checkpoint/1"
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)
_NATIVE = {torch.float32: np.float32, torch.int32: np.int32, torch.uint8: np.uint8}


class CheckpointError(RuntimeError):
    pass


def _tensor_to_raster(t):
    t = t.detach().cpu().contiguous()
    if t.dtype in _NATIVE:
        arr = t.numpy().reshape(1, -1, 1)
    else:  # exact byte copy of other dtypes
        arr = t.reshape(-1).view(torch.uint8).numpy().reshape(1, -1, 1)
    return encode_raster(arr)


def _raster_to_tensor(buf, dtype, shape):
    arr = decode_raster(buf, squeeze=False).reshape(-1)
    dtype = getattr(torch, dtype)
    if dtype in _NATIVE:
        return torch.from_numpy(arr.copy()).reshape(shape)
    if arr.size == 0:
        return torch.empty(shape, dtype=dtype)
    return torch.frombuffer(bytearray(arr.tobytes()), dtype=dtype).reshape(shape)


def _encode(obj, tensors):
    if isinstance(obj, torch.Tensor):
        name = f"t{len(tensors):05d}"
        tensors[name] = obj
        return {"__tensor__": name, "dtype": str(obj.dtype).replace("torch.", ""), "shape": list(obj.shape)}
    if isinstance(obj, dict):
        return {"__dict__": [[_encode(k, tensors), _encode(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, tensors) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, tensors) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialize {type(obj).__name__}")


def _decode(obj, blobs):
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return _raster_to_tensor(blobs(obj["__tensor__"]), obj["dtype"], obj["shape"])
        if "__dict__" in obj:
            return {_decode(k, blobs): _decode(v, blobs) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_decode(v, blobs) for v in obj["__tuple__"])
        if "__ndarray__" in obj:
            return np.asarray(obj["__ndarray__"], dtype=obj["dtype"])
    return obj


def save_checkpoint(path, state, meta=None):
    """Atomically write ``state`` (nested dict) with JSON ``meta``."""
    tensors = {}
    header = {"format": FORMAT, "meta": meta or {}, "state": _encode(state, tensors)}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_FIXED_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        put("header.json", json.dumps(header, sort_keys=True))
        for name, t in tensors.items():
            put(f"tensors/{name}.mgmt", _tensor_to_raster(t))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Return (state, meta)."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
            state = _decode(header["state"], lambda n: zf.read(f"tensors/{n}.mgmt"))
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from None
    return state, header["meta"]


def shapes_of(state, prefix=""):
    """Flat {path: (shape, dtype)} listing of the tensors in a nested state."""
    out = {}
    if isinstance(state, torch.Tensor):
        out[prefix] = (tuple(state.shape), str(state.dtype))
    elif isinstance(state, dict):
        for k, v in state.items():
            out.update(shapes_of(v, f"{prefix}/{k}" if prefix else str(k)))
    elif isinstance(state, (list, tuple)):
        for i, v in enumerate(state):
            out.update(shapes_of(v, f"{prefix}/{i}"))
    return out
