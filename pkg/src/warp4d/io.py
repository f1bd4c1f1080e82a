"""On-disk formats: ZBUF float maps, PNG frames, JSON records, checkpoints.

ZBUF layout: ``b"ZBUF"``, u32 height, u32 width (little-endian), then
``height * width`` little-endian float32 values in row-major order.

Checkpoint layout: one line of JSON (the manifest, newline-terminated)
listing tensor names and shapes in storage order, followed by the
concatenated little-endian float32 payload.
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionError, ValidationError

ZBUF_MAGIC = b"ZBUF"
_ZBUF_HEADER = struct.Struct("<4sII")
CKPT_FORMAT = "warp4d-ckpt"


def encode_zbuf(arr):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DimensionError(f"ZBUF payload must be 2-D, got shape {arr.shape}")
    H, W = arr.shape
    return _ZBUF_HEADER.pack(ZBUF_MAGIC, H, W) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_zbuf(data):
    if len(data) < _ZBUF_HEADER.size:
        raise ValidationError("ZBUF file truncated")
    magic, H, W = _ZBUF_HEADER.unpack_from(data)
    if magic != ZBUF_MAGIC:
        raise ValidationError(f"bad ZBUF magic {magic!r}")
    payload = data[_ZBUF_HEADER.size:]
    if len(payload) != 4 * H * W:
        raise ValidationError(f"ZBUF payload has {len(payload)} bytes, expected {4 * H * W}")
    return np.frombuffer(payload, dtype="<f4").reshape(H, W).astype(np.float32)


def write_zbuf(path, arr):
    Path(path).write_bytes(encode_zbuf(arr))


def read_zbuf(path):
    return decode_zbuf(Path(path).read_bytes())


def to_uint8(x):
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    """Write a unit-range RGB (H, W, 3) or mask/gray (H, W) image."""
    a = np.asarray(img)
    if a.dtype == bool:
        a = a.astype(np.float64)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    Image.fromarray(a).save(path, format="PNG", optimize=False)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def read_mask(path):
    return read_png(path) > 0.5


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_checkpoint(path, tensors, meta=None):
    """``tensors`` is an ordered mapping name -> array; stored as float32."""
    manifest = {
        "format": CKPT_FORMAT,
        "version": 1,
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode() + b"\n"
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    Path(path).write_bytes(header + body)


def load_checkpoint(path):
    """Returns ``(tensors, meta)`` with tensors as float64 arrays."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValidationError(f"{path}: missing checkpoint manifest")
    try:
        manifest = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: bad checkpoint manifest: {exc}") from None
    if manifest.get("format") != CKPT_FORMAT:
        raise ValidationError(f"{path}: not a {CKPT_FORMAT} file")
    body = memoryview(data)[nl + 1:]
    tensors, off = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(body):
            raise ValidationError(f"{path}: checkpoint payload truncated at {entry['name']}")
        arr = np.frombuffer(body[off:off + 4 * n], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
        off += 4 * n
    if off != len(body):
        raise ValidationError(f"{path}: {len(body) - off} trailing bytes in checkpoint")
    return tensors, manifest.get("meta", {})
