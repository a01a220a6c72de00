"""Image codecs: 8-bit PNG (via Pillow) and float32 PFM."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import CheckpointFormatError


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def save_png(path: str, image: np.ndarray) -> None:
    """`image` is float in [0, 1], shape [H, W, 3]."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img.convert("RGB")))


def save_pfm(path: str, image: np.ndarray) -> None:
    """Color PFM, little-endian (negative scale), rows bottom-to-top."""
    data = np.asarray(image, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != 3:
        raise CheckpointFormatError("pfm writer expects [H, W, 3]")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).tobytes(order="C"))


def load_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise CheckpointFormatError(f"{path}: not a color PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=h * w * 3)
    return np.flipud(data.reshape(h, w, 3)).astype(np.float32)
