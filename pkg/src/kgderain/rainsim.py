"""Motion-blur rain synthesis.

A rainy image is the background plus streaks, where the streaks are a sparse
drop mask convolved with a linear motion-blur kernel ``K(theta, length)``.
Rain is added to the luma channel only and luma is clipped at 1.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import imgcore
from .seeding import stream

KERNEL_SIZE = 31
THETA_RANGE = (45.0, 135.0)
LENGTH_RANGE = (15.0, 30.0)
SNR_RANGE = (0.9, 1.0)
SIGMA_RANGE = (0.2, 0.5)


@dataclass(frozen=True)
class MotionKernel:
    theta: float
    length: float
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class RainParams:
    theta: float
    length: float
    mask_snr: float
    mask_sigma: float
    seed: int

    def __post_init__(self):
        for name, (lo, hi) in (
            ("theta", THETA_RANGE),
            ("length", LENGTH_RANGE),
            ("mask_snr", SNR_RANGE),
            ("mask_sigma", SIGMA_RANGE),
        ):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RainParams":
        fields = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        return cls(
            theta=float(fields["theta"]),
            length=float(fields["length"]),
            mask_snr=float(fields["mask_snr"]),
            mask_sigma=float(fields["mask_sigma"]),
            seed=int(fields["seed"]),
        )


@dataclass(frozen=True)
class RainySample:
    rainy: np.ndarray
    streaks: np.ndarray
    kernel: MotionKernel
    mask: np.ndarray
    rain: np.ndarray  # raw K * M, single plane, before luma clipping


def make_motion_kernel(theta: float, length: float, p: int = KERNEL_SIZE) -> MotionKernel:
    """Rasterise a centred line segment.

    ``theta`` is in degrees, counter-clockwise from the horizontal axis with
    image rows pointing down. A segment of ``length`` pixels has its end cell
    centres ``length - 1`` apart; each cell gets ``max(0, 1 - d)`` where ``d``
    is the distance from the cell centre to that segment. Length 1 is
    therefore a single point and yields the identity kernel.
    """
    if p % 2 == 0 or p < 1:
        raise ValueError(f"kernel size must be odd, got {p}")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    off = np.arange(p, dtype=np.float64) - p // 2
    x = off[None, :]
    y = -off[:, None]
    t = math.radians(theta)
    ux, uy = math.cos(t), math.sin(t)
    half = (length - 1.0) / 2.0
    along = x * ux + y * uy
    perp = y * ux - x * uy
    beyond = np.maximum(np.abs(along) - half, 0.0)
    w = np.maximum(0.0, 1.0 - np.hypot(perp, beyond))
    total = w.sum()
    if total <= 0:
        raise ValueError("kernel raster is empty")
    return MotionKernel(float(theta), float(length), w / total)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g2 = np.outer(g, g)
    return g2 / g2.sum()


def convolve_same(img: np.ndarray, kernel) -> np.ndarray:
    """True 2-D convolution with zero padding and an output the size of ``img``.

    Runs as a sum of shifted copies over the kernel's nonzero taps, which is
    cheap for the sparse line kernels used here.
    """
    k = kernel.weights if isinstance(kernel, MotionKernel) else np.asarray(kernel, dtype=np.float64)
    src = np.asarray(img, dtype=np.float64)
    squeeze = src.ndim == 3
    if squeeze:
        if src.shape[2] != 1:
            raise ValueError("convolve_same works on single-channel images")
        src = src[:, :, 0]
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel must be 2-D with odd sides, got {k.shape}")
    h, w = src.shape
    kh, kw = k.shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {k.shape} larger than image {(h, w)}")
    ch, cw = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ch, w + 2 * cw))
    padded[ch : ch + h, cw : cw + w] = src
    out = np.zeros((h, w))
    for a, b in zip(*np.nonzero(k)):
        # out[i, j] += k[a, b] * src[i - (a - ch), j - (b - cw)]
        r0 = 2 * ch - a
        c0 = 2 * cw - b
        out += k[a, b] * padded[r0 : r0 + h, c0 : c0 + w]
    return out[:, :, None] if squeeze else out


def make_drops(h: int, w: int, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Binary drop field: each pixel is 1 with probability ``1 - snr``."""
    return (rng.random((h, w)) < (1.0 - snr)).astype(np.float64)


def make_rain_mask(h: int, w: int, snr: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Salt noise on a zero plane (drop probability ``1 - snr``), Gaussian-blurred."""
    if h <= 0 or w <= 0:
        raise ValueError("mask dimensions must be positive")
    if not 0.0 <= snr <= 1.0:
        raise ValueError(f"snr must lie in [0, 1], got {snr}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    drops = make_drops(h, w, snr, rng)
    g = gaussian_kernel(sigma)
    if g.shape[0] > min(h, w):
        raise ValueError("mask smaller than blur footprint")
    return np.clip(convolve_same(drops, g), 0.0, 1.0)


def sample_rain_params(rng: np.random.Generator) -> RainParams:
    theta = rng.uniform(*THETA_RANGE)
    length = rng.uniform(*LENGTH_RANGE)
    snr = rng.uniform(*SNR_RANGE)
    sigma = rng.uniform(*SIGMA_RANGE)
    seed = int(rng.integers(0, 2**63))
    return RainParams(theta, length, snr, sigma, seed)


def synthesize_rainy(background: np.ndarray, params: RainParams, p: int = KERNEL_SIZE) -> RainySample:
    """Add motion-blurred rain to an RGB background.

    ``streaks`` is the RGB layer actually added, ``rainy - background``; it
    equals the raw ``K * M`` on every channel wherever luma did not clip.
    """
    bg = imgcore.as_image(background)
    if bg.shape[2] != 3:
        raise imgcore.ImageError("rain synthesis needs an RGB background")
    h, w, _ = bg.shape
    rng = stream(params.seed, "mask")
    mask = make_rain_mask(h, w, params.mask_snr, params.mask_sigma, rng)
    kernel = make_motion_kernel(params.theta, params.length, p)
    rain = convolve_same(mask, kernel)
    y = imgcore.rgb_to_yuv(bg)[:, :, 0]
    dy = np.minimum(y + rain, 1.0) - y
    # Only luma changes, so the back-conversion is a per-channel offset
    # (unit luma column of the inverse); this keeps zero rain bit-exact.
    dy = np.maximum(dy, 0.0)
    streaks = np.repeat(dy[:, :, None], 3, axis=2)
    return RainySample(bg + streaks, streaks, kernel, mask, rain)
