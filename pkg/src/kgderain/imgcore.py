"""Image carriers, PNG I/O, colour conversion and patch tiling.

Images are plain ``float64`` numpy arrays of shape ``(height, width, channels)``
with nominal range [0, 1]. ``channels`` is 1 or 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PATCH_SIZE = 64

# Offset-free full-range BT.601. U and V are scaled colour differences, so
# black maps to (0, 0, 0) and every inverse row has unit luma weight.
_U_SCALE = 0.436 / (1.0 - 0.114)
_V_SCALE = 0.615 / (1.0 - 0.299)

RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.299 * _U_SCALE, -0.587 * _U_SCALE, (1.0 - 0.114) * _U_SCALE],
        [(1.0 - 0.299) * _V_SCALE, -0.587 * _V_SCALE, -0.114 * _V_SCALE],
    ]
)
YUV_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.0 / _V_SCALE],
        [1.0, -0.114 / 0.587 / _U_SCALE, -0.299 / 0.587 / _V_SCALE],
        [1.0, 1.0 / _U_SCALE, 0.0],
    ]
)
LUMA = RGB_TO_YUV[0]


class ImageError(ValueError):
    """Raised for malformed image tensors or undecodable files."""


class StitchError(ValueError):
    """Raised when patches do not cover the requested canvas."""


@dataclass(frozen=True)
class Patch:
    origin: tuple[int, int]
    tensor: np.ndarray


def as_image(img) -> np.ndarray:
    """Validate and return ``img`` as a float64 ``(h, w, c)`` array.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"expected (h, w, 1|3) image, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError("empty image")
    return arr


def clamp(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """8-bit code values for ``img`` (clamp, then ``round(x * 255)``)."""
    # np.rint is round-half-even; floor(x + 0.5) gives 0.5 -> 128.
    return np.floor(clamp(img) * 255.0 + 0.5).astype(np.uint8)


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise ImageError(f"{path}: unsupported PNG mode {mode!r}; need 8-bit gray or RGB")
            data = np.asarray(im, dtype=np.uint8)
    except ImageError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt data
        raise ImageError(f"{path}: cannot decode PNG ({exc})") from exc
    return as_image(data.astype(np.float64) / 255.0)


def save_png(img: np.ndarray, path) -> None:
    img = as_image(img)
    codes = quantize(img)
    if codes.shape[2] == 1:
        pil = Image.fromarray(codes[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(codes, mode="RGB")
    pil.save(Path(path), format="PNG")


def _check_rgb(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    if img.shape[2] != 3:
        raise ImageError(f"colour conversion needs 3 channels, got {img.shape[2]}")
    return img


def rgb_to_yuv(img: np.ndarray) -> np.ndarray:
    return _check_rgb(img) @ RGB_TO_YUV.T


def yuv_to_rgb(img: np.ndarray) -> np.ndarray:
    return _check_rgb(img) @ YUV_TO_RGB.T


def luminance(img: np.ndarray) -> np.ndarray:
    """2-D luma plane; single-channel images are returned as-is."""
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


def _grid(extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def patch_origins(height: int, width: int, size: int = PATCH_SIZE, stride: int = 48) -> list[tuple[int, int]]:
    if size > min(height, width):
        raise ImageError(f"image {height}x{width} smaller than patch size {size}")
    if stride < 1:
        raise ValueError("stride must be positive")
    return [(r, c) for r in _grid(height, size, stride) for c in _grid(width, size, stride)]


def extract_patches(img: np.ndarray, size: int = PATCH_SIZE, stride: int = 48) -> list[Patch]:
    """Tile ``img`` on a stride grid whose last row/column is snapped inward."""
    img = as_image(img)
    h, w, _ = img.shape
    return [
        Patch((r, c), img[r : r + size, c : c + size].copy())
        for r, c in patch_origins(h, w, size, stride)
    ]


def stitch_patches(pieces, height: int, width: int) -> np.ndarray:
    """Reassemble ``(Patch, processed)`` pairs, averaging overlaps uniformly."""
    acc = None
    count = np.zeros((height, width, 1))
    for patch, data in pieces:
        data = as_image(data)
        ph, pw = patch.tensor.shape[:2]
        if data.shape[:2] != (ph, pw):
            raise StitchError(f"processed patch {data.shape[:2]} does not match footprint {(ph, pw)}")
        if acc is None:
            acc = np.zeros((height, width, data.shape[2]))
        r, c = patch.origin
        if r < 0 or c < 0 or r + ph > height or c + pw > width:
            raise StitchError(f"patch at {patch.origin} falls outside {height}x{width}")
        acc[r : r + ph, c : c + pw] += data
        count[r : r + ph, c : c + pw] += 1.0
    if acc is None or np.any(count == 0):
        raise StitchError("some pixels are not covered by any patch")
    return acc / count
