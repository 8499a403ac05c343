"""Image I/O: PFM for linear float data, PNG (via Pillow) for previews.

PNG output applies the fixed display transform clamp(linear)^(1/2.2);
PFM files hold the raw linear values used by losses and oracles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 1.0 / 2.2


def tonemap(linear: np.ndarray) -> np.ndarray:
    """Linear radiance -> 8-bit sRGB-ish preview values."""
    out = np.clip(linear, 0.0, 1.0) ** GAMMA
    return (out * 255.0 + 0.5).astype(np.uint8)


def save_png(path, linear: np.ndarray) -> None:
    arr = tonemap(np.asarray(linear))
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_png_linear(path) -> np.ndarray:
    """Inverse of save_png up to 8-bit quantization."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return (arr ** (1.0 / GAMMA)).astype(np.float32)


def save_pfm(path, image: np.ndarray) -> None:
    """Write a portable float map (little-endian, bottom-up rows per spec)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header, data = b"Pf", image[:, :, None]
    elif image.ndim == 3 and image.shape[2] == 3:
        header, data = b"PF", image
    else:
        raise ValueError(f"PFM supports HxW or HxWx3, got {image.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        nl1 = raw.index(b"\n")
        nl2 = raw.index(b"\n", nl1 + 1)
        nl3 = raw.index(b"\n", nl2 + 1)
        header = raw[:nl1].strip()
        w, h = (int(x) for x in raw[nl1 + 1 : nl2].split())
        scale = float(raw[nl2 + 1 : nl3])
    except (ValueError, IndexError) as e:
        raise IOError(f"{path}: malformed PFM header") from e
    channels = 3 if header == b"PF" else 1
    count = w * h * channels
    dtype = "<f4" if scale < 0 else ">f4"
    payload = raw[nl3 + 1 :]
    if len(payload) < count * 4:
        raise IOError(f"{path}: PFM payload truncated ({len(payload)} < {count * 4} bytes)")
    data = np.frombuffer(payload[: count * 4], dtype=dtype).reshape(h, w, channels)
    data = np.flipud(data).astype(np.float32)
    return data[:, :, 0] if channels == 1 else data
