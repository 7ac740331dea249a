"""Image file formats.

PPM (binary P6, 8-bit) for RGB previews. Multi-channel / depth / label
images use a raw float container:

    bytes 0..3   magic b"HHF1"
    bytes 4..15  three little-endian uint32: d0 (height), d1 (width), d2 (channels)
    then         d0*d1*d2 little-endian float32 values, C-order

The container is also used for generic (d0, d1, d2) float arrays such as
per-frame landmark stacks.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HHF1"


def write_ppm(path, img):
    """Write an (H,W,3) float image in [0,1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM wants (H,W,3), got {img.shape}")
    data = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError("not a binary PPM file")
        dims = []
        while len(dims) < 3:
            line = f.readline()
            if line.startswith(b"#"):
                continue
            dims.extend(int(v) for v in line.split())
        w, h, maxval = dims
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return (data.reshape(h, w, 3).astype(np.float64) / float(maxval))


def write_float_image(path, arr):
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"float container wants a 2-d or 3-d array, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", *arr.shape))
        f.write(arr.astype("<f4").tobytes())


def read_float_image(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic, not a float image container")
        d0, d1, d2 = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(d0 * d1 * d2 * 4), dtype="<f4")
    if data.size != d0 * d1 * d2:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(d0, d1, d2).astype(np.float32)
