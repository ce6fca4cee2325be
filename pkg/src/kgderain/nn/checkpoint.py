"""Binary checkpoints.

Layout (little-endian)::

    b"KGCN" | u32 version | u32 header length | header (UTF-8 JSON) | u64 adam step
    | per layer, in spec order: parameters, batchnorm buffers, adam m, adam v
      (each group in sorted name order, raw f64)

The header carries the layer list and a free-form ``meta`` mapping. JSON is
written with sorted keys so identical runs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .net import LayerSpec, NetState, buffer_shapes, param_shapes

MAGIC = b"KGCN"
VERSION = 1


def _groups(spec):
    for layer in spec:
        yield param_shapes(layer), buffer_shapes(layer)


def save_checkpoint(path, spec, state: NetState, meta: dict | None = None) -> None:
    header = json.dumps(
        {"layers": [layer.to_dict() for layer in spec], "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<Q", state.step)]
    for i, (pshapes, bshapes) in enumerate(_groups(spec)):
        for store, shapes in (
            (state.params[i], pshapes),
            (state.buffers[i], bshapes),
            (state.m[i], pshapes),
            (state.v[i], pshapes),
        ):
            for name in sorted(shapes):
                arr = np.asarray(store[name], dtype=np.float64)
                if arr.shape != tuple(shapes[name]):
                    raise ValueError(f"layer {i} {name}: shape {arr.shape}, spec wants {shapes[name]}")
                chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(spec, state, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    spec = [LayerSpec.from_dict(d) for d in header["layers"]]
    offset = 12 + hlen
    (step,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    params, buffers, ms, vs = [], [], [], []
    for pshapes, bshapes in _groups(spec):
        out = []
        for shapes in (pshapes, bshapes, pshapes, pshapes):
            d = {}
            for name in sorted(shapes):
                n = int(np.prod(shapes[name]))
                if offset + 8 * n > len(raw):
                    raise ValueError(f"{path}: truncated checkpoint")
                d[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shapes[name])
                offset += 8 * n
            out.append(d)
        params.append(out[0])
        buffers.append(out[1])
        ms.append(out[2])
        vs.append(out[3])
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return spec, NetState(params, buffers, ms, vs, step), header["meta"]
