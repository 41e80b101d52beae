"""Image file handling: PNG read/write, bilinear resize, grid montage.

Pixels are float arrays in [0,1] with C,H,W layout everywhere inside the
pipeline; quantization to 8-bit happens only when writing files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, DimensionError


def load_image(path) -> np.ndarray:
    """Read an image file into a float32 C,H,W array in [0,1]."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if ("A" in img.mode or len(img.getbands()) > 1) else "L")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image file {path} does not exist") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        return arr[None, :, :]
    return arr.transpose(2, 0, 1)


def save_image(array: np.ndarray, path) -> None:
    """Write a C,H,W [0,1] array as an 8-bit grayscale or RGB PNG."""
    array = np.asarray(array)
    if array.ndim != 3 or array.shape[0] not in (1, 3):
        raise DimensionError(f"save_image expects (1|3, H, W), got {array.shape}")
    quantized = np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)
    if quantized.shape[0] == 1:
        img = Image.fromarray(quantized[0], mode="L")
    else:
        img = Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    img.save(path, format="PNG")


def adapt_channels(array: np.ndarray, channels: int) -> np.ndarray:
    """Convert between grayscale and RGB channel counts."""
    c = array.shape[0]
    if c == channels:
        return array
    if c == 1:
        return np.repeat(array, channels, axis=0)
    if channels == 1:
        return array.mean(axis=0, keepdims=True)
    raise DimensionError(f"cannot adapt {c}-channel image to {channels} channels")


def bilinear_resize(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a C,H,W array (half-pixel-center convention)."""
    c, h, w = array.shape
    if (h, w) == (out_h, out_w):
        return array.astype(np.float32, copy=False)
    src_y = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    src_x = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (src_y - y0)[None, :, None]
    wx = (src_x - x0)[None, None, :]
    a = array[:, y0][:, :, x0]
    b = array[:, y0][:, :, x1]
    cc = array[:, y1][:, :, x0]
    d = array[:, y1][:, :, x1]
    out = a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + cc * wy * (1 - wx) + d * wy * wx
    return out.astype(np.float32)


def fit_to_geometry(array: np.ndarray, geometry: tuple[int, int, int]) -> np.ndarray:
    """Adapt channels and bilinearly resize to the template's geometry."""
    channels, height, width = geometry
    return bilinear_resize(adapt_channels(array, channels), height, width)


def make_grid(images: np.ndarray, cols: int | None = None, pad: int = 2, pad_value: float = 0.0) -> np.ndarray:
    """Tile a batch of equally-sized images into one montage array."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise DimensionError(f"make_grid expects (B, C, H, W), got {images.shape}")
    b, c, h, w = images.shape
    if b == 0:
        raise DimensionError("make_grid needs at least one image")
    if cols is None:
        cols = int(np.ceil(np.sqrt(b)))
    if cols < 1:
        raise DimensionError(f"cols must be >= 1, got {cols}")
    rows = (b + cols - 1) // cols
    grid = np.full(
        (c, rows * h + pad * (rows + 1), cols * w + pad * (cols + 1)), pad_value, dtype=np.float32
    )
    for i in range(b):
        r, col = divmod(i, cols)
        y = pad + r * (h + pad)
        x = pad + col * (w + pad)
        grid[:, y : y + h, x : x + w] = images[i]
    return grid


def load_image_dir(path, pattern: str = "*.png") -> tuple[list[str], np.ndarray]:
    """Load all equally-shaped images of a directory, sorted by filename."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path} is not a directory")
    files = sorted(path.glob(pattern)) or sorted(
        p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not files:
        raise DataError(f"no images found in {path}")
    arrays = [load_image(p) for p in files]
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DimensionError(f"images in {path} have mixed shapes: {sorted(shapes)}")
    return [p.name for p in files], np.stack(arrays)
