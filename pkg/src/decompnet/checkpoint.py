"""Versioned binary model container.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic b"DCNT"
    4       4     u32 format version (currently 1)
    8       4     u32 header length H in bytes
    12      H     UTF-8 JSON header
    12+H    ...   float64 little-endian parameter blocks, back to back

The header lists every block as ``{"name", "shape"}`` in storage order:
for each layer ``l`` in turn ``w{l}``, then ``bias{l}``, ``gamma{l}``,
``beta{l}``, ``bn_mean{l}``, ``bn_var{l}`` for whichever exist. The JSON is
written with sorted keys and no whitespace so equal models give equal bytes.
"""
import json
import struct

import numpy as np

from .errors import ParseError
from .network import LayerSpec, NetworkModel

MAGIC = b"DCNT"
VERSION = 1


def _blocks(model):
    for idx, (w, th, st) in enumerate(zip(model.weights, model.theta, model.bn_stats)):
        yield f"w{idx}", w
        for key in ("bias", "gamma", "beta"):
            if key in th:
                yield f"{key}{idx}", th[key]
        if st is not None:
            yield f"bn_mean{idx}", st[0]
            yield f"bn_var{idx}", st[1]


def to_bytes(model):
    blocks = list(_blocks(model))
    header = {
        "format": "decompnet-model",
        "layers": [spec.to_dict() for spec in model.layers],
        "input_shape": list(model.input_shape),
        "bn_ranks": None if model.bn_ranks is None else [int(r) for r in model.bn_ranks],
        "meta": model.meta,
        "blocks": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
    }
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text]
    parts += [np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in blocks]
    return b"".join(parts)


def from_bytes(raw):
    if len(raw) < 12:
        raise ParseError("truncated checkpoint header", offset=len(raw))
    if raw[:4] != MAGIC:
        raise ParseError(f"bad checkpoint magic {raw[:4]!r}", offset=0)
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    if len(raw) < 12 + hlen:
        raise ParseError("truncated JSON header", offset=len(raw))
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable JSON header: {exc}", offset=12) from None
    pos = 12 + hlen
    arrays = {}
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise ParseError(f"block {blk['name']} runs past end of file", offset=pos)
        arrays[blk["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(raw):
        raise ParseError(f"{len(raw) - pos} trailing bytes after last block", offset=pos)
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    weights, theta, stats = [], [], []
    for idx in range(len(layers)):
        weights.append(arrays[f"w{idx}"])
        theta.append({k: arrays[f"{k}{idx}"] for k in ("bias", "gamma", "beta") if f"{k}{idx}" in arrays})
        stats.append((arrays[f"bn_mean{idx}"], arrays[f"bn_var{idx}"]) if f"bn_mean{idx}" in arrays else None)
    bn_ranks = header.get("bn_ranks")
    return NetworkModel(
        layers,
        tuple(header["input_shape"]),
        weights,
        theta,
        stats,
        None if bn_ranks is None else tuple(bn_ranks),
        header.get("meta", {}),
    )


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
