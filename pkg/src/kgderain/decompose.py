"""Guided-filter smoothing and the structure/texture split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imgcore


@dataclass(frozen=True)
class GuidedFilterConfig:
    radius: int = 15
    epsilon: float = 1.0

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


def _plane(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty image")
    return arr


def _window_sums(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    c = np.cumsum(a, axis=axis)
    zero_shape = list(a.shape)
    zero_shape[axis] = 1
    c = np.concatenate([np.zeros(zero_shape), c], axis=axis)
    idx = np.arange(n)
    hi = np.minimum(idx + r + 1, n)
    lo = np.maximum(idx - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def box_filter(img, radius: int) -> np.ndarray:
    """Mean over the ``(2r+1)^2`` window, truncated (not padded) at the borders.

    Separable running sums over an integral image, O(1) per pixel.
    """
    a = _plane(img)
    if radius < 1:
        raise ValueError("radius must be >= 1")
    ones_r = _window_sums(np.ones((a.shape[0], 1)), radius, 0)
    ones_c = _window_sums(np.ones((1, a.shape[1])), radius, 1)
    sums = _window_sums(_window_sums(a, radius, 0), radius, 1)
    return sums / (ones_r * ones_c)


def guided_filter(src, guide, cfg: GuidedFilterConfig = GuidedFilterConfig()) -> np.ndarray:
    p = _plane(src)
    g = _plane(guide)
    if p.shape != g.shape:
        raise ValueError(f"input {p.shape} and guide {g.shape} differ in size")
    r, eps = cfg.radius, cfg.epsilon
    mean_g = box_filter(g, r)
    mean_p = box_filter(p, r)
    cov_gp = box_filter(g * p, r) - mean_g * mean_p
    var_g = box_filter(g * g, r) - mean_g * mean_g
    a = cov_gp / (var_g + eps)
    b = mean_p - a * mean_g
    return box_filter(a, r) * g + box_filter(b, r)


def split_texture(img, cfg: GuidedFilterConfig = GuidedFilterConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(structure, texture)`` with ``structure + texture == img``.

    Each channel is filtered with itself as guide.
    """
    img = imgcore.as_image(img)
    structure = np.stack(
        [guided_filter(img[:, :, c], img[:, :, c], cfg) for c in range(img.shape[2])], axis=2
    )
    return structure, img - structure


def texture_for_display(texture: np.ndarray) -> np.ndarray:
    return (np.asarray(texture) + 1.0) / 2.0
