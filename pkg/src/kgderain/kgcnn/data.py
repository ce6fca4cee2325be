"""Synthetic training patches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import imgcore
from ..decompose import GuidedFilterConfig, split_texture
from ..kernelspace import PcaBasis, project
from ..rainsim import LENGTH_RANGE, THETA_RANGE, RainParams, sample_rain_params, synthesize_rainy
from .specs import PATCH


def normalize_params(theta: float, length: float) -> np.ndarray:
    return np.array(
        [
            (theta - THETA_RANGE[0]) / (THETA_RANGE[1] - THETA_RANGE[0]),
            (length - LENGTH_RANGE[0]) / (LENGTH_RANGE[1] - LENGTH_RANGE[0]),
        ]
    )


def denormalize_params(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    theta = THETA_RANGE[0] + v[0] * (THETA_RANGE[1] - THETA_RANGE[0])
    length = LENGTH_RANGE[0] + v[1] * (LENGTH_RANGE[1] - LENGTH_RANGE[0])
    return float(theta), float(length)


@dataclass
class PatchDataset:
    textures: np.ndarray  # (n, 64, 64, 3)
    labels: np.ndarray  # (n, 2) normalised (theta, length)
    streaks: np.ndarray  # (n, 64, 64, 3)
    coeffs: np.ndarray  # (n, t)
    params: list
    crops: np.ndarray | None = None  # (n, 64, 64, 3) clean crops, kept for re-raining

    def __len__(self) -> int:
        return self.textures.shape[0]

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset(
            self.textures[idx],
            self.labels[idx],
            self.streaks[idx],
            self.coeffs[idx],
            [self.params[i] for i in idx],
            None if self.crops is None else self.crops[idx],
        )

    def rerained(
        self, rng: np.random.Generator, pca: PcaBasis | None, cfg: GuidedFilterConfig = GuidedFilterConfig()
    ) -> "PatchDataset":
        """Same clean crops under freshly sampled rain."""
        if self.crops is None:
            raise ValueError("dataset was built without its clean crops")
        return _synthesize(self.crops, rng, pca, cfg)


def load_corpus(clean_dir) -> list[np.ndarray]:
    """All PNGs of a directory (sorted by name) as RGB images."""
    paths = sorted(Path(clean_dir).glob("*.png"))
    images = []
    for p in paths:
        img = imgcore.load_png(p)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        images.append(img)
    return images


def make_sample(background: np.ndarray, params: RainParams, pca: PcaBasis | None, cfg: GuidedFilterConfig):
    """``(texture, labels, streaks, coeffs)`` for one background; no coefficients without a basis."""
    sample = synthesize_rainy(background, params)
    _, texture = split_texture(sample.rainy, cfg)
    coeffs = np.zeros(0) if pca is None else project(sample.kernel, pca)
    return texture, normalize_params(params.theta, params.length), sample.streaks, coeffs


def build_training_set(
    corpus,
    n_patches: int,
    rng: np.random.Generator,
    pca: PcaBasis | None,
    cfg: GuidedFilterConfig = GuidedFilterConfig(),
) -> PatchDataset:
    """Random 64x64 crops, each with freshly sampled rain.

    All crops are drawn first, then the rain for each, so
    :meth:`PatchDataset.rerained` with the same generator state reproduces
    the rain exactly.

    ``corpus`` is a directory of clean PNGs or a list of RGB arrays. Without a
    basis the coefficient array has zero columns (enough for the parameter net).
    """
    images = load_corpus(corpus) if isinstance(corpus, (str, Path)) else [imgcore.as_image(i) for i in corpus]
    t = 0 if pca is None else pca.t
    if n_patches == 0:
        empty = np.zeros((0, PATCH, PATCH, 3))
        return PatchDataset(empty, np.zeros((0, 2)), empty.copy(), np.zeros((0, t)), [], empty.copy())
    if not images:
        raise ValueError("empty corpus")
    for img in images:
        if min(img.shape[:2]) < PATCH:
            raise ValueError(f"corpus image {img.shape[:2]} smaller than {PATCH}x{PATCH}")
    crops = np.empty((n_patches, PATCH, PATCH, 3))
    for i in range(n_patches):
        img = images[int(rng.integers(len(images)))]
        r = int(rng.integers(img.shape[0] - PATCH + 1))
        c = int(rng.integers(img.shape[1] - PATCH + 1))
        crops[i] = img[r : r + PATCH, c : c + PATCH]  # grey broadcasts to RGB
    return _synthesize(crops, rng, pca, cfg)


def _synthesize(crops: np.ndarray, rng: np.random.Generator, pca: PcaBasis | None, cfg: GuidedFilterConfig):
    n = crops.shape[0]
    tex = np.empty_like(crops)
    streaks = np.empty_like(crops)
    labels = np.empty((n, 2))
    coeffs = np.empty((n, 0 if pca is None else pca.t))
    params = []
    for i in range(n):
        rp = sample_rain_params(rng)
        tex[i], labels[i], streaks[i], coeffs[i] = make_sample(crops[i], rp, pca, cfg)
        params.append(rp)
    return PatchDataset(tex, labels, streaks, coeffs, params, crops)
