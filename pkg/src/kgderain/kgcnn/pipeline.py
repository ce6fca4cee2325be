"""Kernel estimation and whole-image deraining."""

from __future__ import annotations

import numpy as np

from .. import imgcore, nn
from ..decompose import GuidedFilterConfig, split_texture
from ..kernelspace import PcaBasis, project
from ..rainsim import KERNEL_SIZE, MotionKernel, make_motion_kernel
from .data import denormalize_params
from .specs import PATCH
from .train import TrainedNet

STRIDE = 48


def predict_params(textures: np.ndarray, param_net: TrainedNet) -> np.ndarray:
    """Normalised (theta, length) per patch, clamped to [0, 1]."""
    y = nn.forward(param_net.spec, param_net.state, textures)
    return np.clip(y.reshape(len(textures), 2), 0.0, 1.0)


def kernel_from_output(v) -> tuple[float, float, MotionKernel]:
    theta, length = denormalize_params(np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0))
    return theta, length, make_motion_kernel(theta, length, KERNEL_SIZE)


def estimate_kernel(texture_patch: np.ndarray, param_net: TrainedNet) -> tuple[float, float, MotionKernel]:
    v = predict_params(np.asarray(texture_patch)[None], param_net)[0]
    return kernel_from_output(v)


def _is_guided(derain_net: TrainedNet) -> bool:
    return any(layer.kind == "concat_external" for layer in derain_net.spec)


def guidance(textures, mode: str, param_net: TrainedNet | None, pca: PcaBasis | None) -> np.ndarray | None:
    """Coefficient batch fed to the derain net for ``mode``."""
    if mode == "derain_only":
        return None
    if pca is None:
        raise ValueError(f"mode {mode!r} needs a kernel basis")
    if mode == "zero_kernel":
        return np.zeros((len(textures), pca.t))
    if mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    if param_net is None:
        raise ValueError("full mode needs a parameter net")
    preds = predict_params(textures, param_net)
    return np.stack([project(kernel_from_output(v)[2], pca) for v in preds])


def predict_streaks(textures, derain_net: TrainedNet, coeffs) -> np.ndarray:
    return nn.forward(derain_net.spec, derain_net.state, textures, coeffs)


def derain_image(
    rainy: np.ndarray,
    param_net: TrainedNet | None,
    derain_net: TrainedNet,
    pca: PcaBasis | None,
    mode: str = "full",
    cfg: GuidedFilterConfig = GuidedFilterConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(derained, streaks)`` for an RGB image of at least 64x64.

    Streaks are predicted per overlapping patch on its texture component,
    stitched, floored at zero, and subtracted.
    """
    rainy = imgcore.as_image(rainy)
    if rainy.shape[2] != 3:
        raise imgcore.ImageError("derain_image needs an RGB image")
    guided = _is_guided(derain_net)
    if guided == (mode == "derain_only"):
        raise ValueError(f"mode {mode!r} does not match the derain net architecture")
    h, w, _ = rainy.shape
    patches = imgcore.extract_patches(rainy, PATCH, STRIDE)
    textures = np.stack([split_texture(p.tensor, cfg)[1] for p in patches])
    coeffs = guidance(textures, mode, param_net, pca)
    pred = predict_streaks(textures, derain_net, coeffs)
    streaks = imgcore.stitch_patches(zip(patches, pred), h, w)
    streaks = np.maximum(streaks, 0.0)
    return imgcore.clamp(rainy - streaks), streaks
