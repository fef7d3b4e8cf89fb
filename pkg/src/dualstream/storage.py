"""Checkpoint serialization and PPM image output.

Checkpoint layout (all little-endian): magic ``CARE``, u32 version=1,
u32 entry count, then per entry u16 name length, UTF-8 name, u8 dtype code
(0 = float32, 1 = raw u8), u8 rank, u32 per dim, raw payload. Metadata is a
final entry named ``__meta__`` holding UTF-8 JSON as u8 bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor
from . import tree as tr

MAGIC = b"CARE"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
META_NAME = "__meta__"


def _write_entry(fh, name: str, dtype_code: int, payload: bytes, shape) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", dtype_code, len(shape)))
    for dim in shape:
        fh.write(struct.pack("<I", dim))
    fh.write(payload)


def save_checkpoint(path: str, params, meta: dict) -> None:
    flat = tr.flatten(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(flat) + 1))
        for name, tensor in flat:
            payload = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
            _write_entry(fh, name, DTYPE_F32, payload, tensor.shape)
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        _write_entry(fh, META_NAME, DTYPE_U8, meta_bytes, (len(meta_bytes),))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated checkpoint payload")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Returns (flat name -> float32 ndarray, metadata dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    (version, count) = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        dtype_code, rank = r.unpack("<BB")
        shape = tuple(r.unpack("<I")[0] for _ in range(rank))
        n_items = int(np.prod(shape)) if shape else 1
        if dtype_code == DTYPE_F32:
            arrays[name] = np.frombuffer(
                r.take(4 * n_items), dtype="<f4").reshape(shape).copy()
        elif dtype_code == DTYPE_U8:
            payload = r.take(n_items)
            if name == META_NAME:
                meta = json.loads(payload.decode("utf-8"))
            else:
                arrays[name] = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
        else:
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
    return arrays, meta


def params_from_arrays(flat: dict[str, np.ndarray]):
    """Rebuild the nested parameter tree; grad flags follow leaf roles."""

    def trainable(name: str) -> bool:
        if name.startswith("momentum/") or name.startswith("velocities/"):
            return False
        return not name.endswith(("/mean", "/var"))

    tensors = {name: Tensor(arr, requires_grad=trainable(name))
               for name, arr in flat.items()}
    return tr.unflatten(tensors)


# ---------------------------------------------------------------------------
# PPM output


def heat_ramp(values: np.ndarray) -> np.ndarray:
    """Fixed blue -> red ramp: 0 maps to pure blue, 1 to pure red."""
    v = np.clip(values, 0.0, 1.0)
    return np.stack([v, np.zeros_like(v), 1.0 - v])


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a binary P6 PPM. 2-d input is treated as a heatmap and pushed
    through the blue->red ramp; 3-d input is (3,H,W) RGB in [0,1]."""
    if image.ndim == 2:
        rgb = heat_ramp(image)
    elif image.ndim == 3 and image.shape[0] == 3:
        rgb = np.clip(image, 0.0, 1.0)
    else:
        raise FormatError(f"write_ppm wants (H,W) or (3,H,W), got {image.shape}")
    h, w = rgb.shape[1], rgb.shape[2]
    body = np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(body)
