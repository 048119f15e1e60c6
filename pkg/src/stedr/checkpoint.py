"""Deterministic binary checkpoints for trained models.

Layout: magic, uint32 format version, uint64 header length, a sorted-key JSON
header, then the raw little-endian array bytes in header order. Nothing
time- or host-dependent is written, so equal models give equal files.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .errors import InvalidArgument
from .prediction import STEDRNet, TrainConfig, TrainedModel

MAGIC = b"STEDRCKP"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "bool": "|b1"}


def _pack(meta, arrays):
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = str(a.dtype)
        if kind not in _DTYPES:
            raise InvalidArgument(f"unsupported array dtype {kind} for {name}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def _unpack(buf):
    if buf[:len(MAGIC)] != MAGIC:
        raise InvalidArgument("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != VERSION:
        raise InvalidArgument(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(buf[start:start + hlen])
    body = start + hlen
    arrays = {}
    for e in header["arrays"]:
        lo = body + e["offset"]
        a = np.frombuffer(buf[lo:lo + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        arrays[e["name"]] = a.astype(e["dtype"]).reshape(e["shape"])
    return header["meta"], arrays


def to_bytes(model: TrainedModel):
    # parameters are always stored as float64; float32 models widen and narrow back exactly
    arrays = {"param/" + k: v.detach().cpu().double().numpy()
              for k, v in model.net.state_dict().items()}
    arrays["x_mean"] = np.asarray(model.x_mean, dtype=float)
    arrays["x_scale"] = np.asarray(model.x_scale, dtype=float)
    for part, idx in model.split.items():
        arrays["split/" + part] = np.asarray(idx, dtype=np.int64)
    meta = {"config": model.config.to_dict(), "pr_t": model.pr_t, "n_codes": model.n_codes,
            "t_max": model.t_max, "y_mean": model.y_mean, "y_scale": model.y_scale,
            "history": model.history, "best_epoch": model.best_epoch}
    return _pack(meta, arrays)


def from_bytes(buf):
    meta, arrays = _unpack(buf)
    config = TrainConfig.from_dict(meta["config"])
    net = STEDRNet(meta["n_codes"], meta["t_max"], config).to(config.torch_dtype)
    state = {k[len("param/"):]: torch.from_numpy(v.copy()).to(config.torch_dtype)
             for k, v in arrays.items() if k.startswith("param/")}
    net.load_state_dict(state)
    net.eval()
    split = {k[len("split/"):]: v for k, v in arrays.items() if k.startswith("split/")}
    return TrainedModel(net, config, meta["pr_t"], meta["n_codes"], meta["t_max"],
                        arrays["x_mean"], arrays["x_scale"], meta["y_mean"], meta["y_scale"],
                        meta["history"], meta["best_epoch"], split)


def save(model, path):
    buf = to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(buf)
    return hashlib.sha256(buf).hexdigest()


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def digest(model):
    return hashlib.sha256(to_bytes(model)).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
