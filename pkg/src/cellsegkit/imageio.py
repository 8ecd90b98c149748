"""PNG and raw-raster I/O.

The raster format is ``b"CSK1"`` followed by little-endian u32 H, W, C and
then H*W*C little-endian float32 values in row-major, channel-last order.
"""
import struct
from pathlib import Path

import numpy as np
from PIL import Image

RASTER_MAGIC = b"CSK1"


def to_uint8(values):
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8), mode="L").save(path)


def read_mask_png(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def write_gray_png(path, values):
    """Write a single-channel raster in [0, 1] as 8-bit grayscale."""
    Image.fromarray(to_uint8(values), mode="L").save(path)


def write_u8_png(path, values):
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


def read_u8_png(path):
    return np.asarray(Image.open(path).convert("L"))


def read_gray_png(path):
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def write_rgb_png(path, image):
    Image.fromarray(to_uint8(image[..., :3]), mode="RGB").save(path)


def read_rgb_png(path):
    img = Image.open(path)
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float64)[..., None].repeat(3, axis=2)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_raster(path, data):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        raise ValueError(f"raster must be HxW or HxWxC, got shape {data.shape}")
    h, w, c = data.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_raster(path):
    raw = Path(path).read_bytes()
    if raw[:4] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a CSK1 raster (magic {raw[:4]!r})")
    h, w, c = struct.unpack_from("<III", raw, 4)
    payload = raw[16:]
    if len(payload) != 4 * h * w * c:
        raise ValueError(f"{path}: expected {4 * h * w * c} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
