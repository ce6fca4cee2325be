"""PCA over motion-blur kernels and stretching of projections into maps."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rainsim import KERNEL_SIZE, LENGTH_RANGE, THETA_RANGE, MotionKernel, make_motion_kernel

MAX_DIM = 162
BASIS_MAGIC = b"KGPB"
BASIS_VERSION = 1

log = logging.getLogger(__name__)


class DegenerateFamilyError(ValueError):
    pass


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray  # (p*p,)
    components: np.ndarray  # (t, p*p), orthonormal rows
    energy_kept: float

    @property
    def t(self) -> int:
        return self.components.shape[0]

    @property
    def p(self) -> int:
        return int(round(np.sqrt(self.mean.size)))


def sample_kernel_family(theta_steps: int = 91, length_steps: int = 16, p: int = KERNEL_SIZE) -> list[MotionKernel]:
    if theta_steps < 2 or length_steps < 2:
        raise ValueError("need at least 2 steps per axis")
    return [
        make_motion_kernel(theta, length, p)
        for theta in np.linspace(*THETA_RANGE, theta_steps)
        for length in np.linspace(*LENGTH_RANGE, length_steps)
    ]


def _vectorize(kernels) -> np.ndarray:
    rows = [k.weights.ravel() if isinstance(k, MotionKernel) else np.asarray(k, dtype=np.float64).ravel() for k in kernels]
    return np.stack(rows)


def fit_pca(kernels, energy_threshold: float = 0.99, max_dim: int = MAX_DIM) -> PcaBasis:
    """Fit a basis keeping the fewest components reaching ``energy_threshold``.

    When there are fewer kernels than pixels the eigenproblem is solved on the
    sample Gram matrix instead of the pixel covariance.
    """
    if not 0.0 < energy_threshold <= 1.0:
        raise ValueError("energy_threshold must lie in (0, 1]")
    X = _vectorize(kernels)
    n, d = X.shape
    if n < 2:
        raise DegenerateFamilyError("need at least two kernels")
    mean = X.mean(axis=0)
    Xc = X - mean
    if n < d:
        evals, u = np.linalg.eigh(Xc @ Xc.T)
        evals = np.clip(evals[::-1], 0.0, None)
        u = u[:, ::-1]
        keep = evals > evals[0] * 1e-12 if evals[0] > 0 else np.zeros_like(evals, dtype=bool)
        vecs = (Xc.T @ u[:, keep]) / np.sqrt(evals[keep])
        vecs = vecs.T
        evals = evals[keep]
    else:
        evals, v = np.linalg.eigh(Xc.T @ Xc)
        evals = np.clip(evals[::-1], 0.0, None)
        vecs = v[:, ::-1].T
    total = evals.sum()
    # Variance at rounding level relative to the kernels' own energy means
    # every kernel is the same one.
    if not np.isfinite(total) or total <= 1e-24 * max(float((X**2).sum()), 1e-300):
        raise DegenerateFamilyError("kernel family has zero variance")
    cum = np.cumsum(evals) / total
    t = int(np.searchsorted(cum, energy_threshold - 1e-12) + 1)
    t = min(t, max_dim, len(evals))
    comps = vecs[:t].copy()
    # Fix the sign so the basis is reproducible: largest-magnitude entry positive.
    pivots = comps[np.arange(t), np.argmax(np.abs(comps), axis=1)]
    comps *= np.where(pivots < 0, -1.0, 1.0)[:, None]
    log.info("kernel PCA: %d kernels of %d pixels, kept t=%d (energy %.6f, cap %d)", n, d, t, cum[t - 1], max_dim)
    return PcaBasis(mean, comps, float(cum[t - 1]))


def project(kernel, basis: PcaBasis) -> np.ndarray:
    k = kernel.weights if isinstance(kernel, MotionKernel) else np.asarray(kernel, dtype=np.float64)
    vec = k.ravel()
    if vec.size != basis.mean.size:
        raise ValueError(f"kernel has {vec.size} entries, basis expects {basis.mean.size}")
    return basis.components @ (vec - basis.mean)


def reconstruct(coeffs: np.ndarray, basis: PcaBasis) -> np.ndarray:
    p = basis.p
    return (basis.mean + np.asarray(coeffs) @ basis.components).reshape(p, p)


def stretch(coeffs, m: int, n: int) -> np.ndarray:
    """Degradation maps: an ``(m, n, t)`` array whose slice ``j`` is ``coeffs[j]``."""
    c = np.asarray(coeffs, dtype=np.float64).ravel()
    if c.size < 1:
        raise ValueError("need at least one coefficient")
    return np.broadcast_to(c, (m, n, c.size)).copy()


def save_basis(basis: PcaBasis, path) -> None:
    """Layout: magic, u32 version, u32 p, u32 t, mean, components, then one
    trailing f64 with the retained energy share (all little-endian)."""
    with open(Path(path), "wb") as fh:
        fh.write(BASIS_MAGIC)
        fh.write(struct.pack("<III", BASIS_VERSION, basis.p, basis.t))
        fh.write(basis.mean.astype("<f8").tobytes())
        fh.write(basis.components.astype("<f8").tobytes())
        fh.write(struct.pack("<d", basis.energy_kept))


def load_basis(path) -> PcaBasis:
    """Read a basis file; the energy trailer is optional (NaN when absent)."""
    raw = Path(path).read_bytes()
    if raw[:4] != BASIS_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not a kernel basis file")
    version, p, t = struct.unpack_from("<III", raw, 4)
    if version != BASIS_VERSION:
        raise ValueError(f"{path}: unsupported basis version {version}")
    n = p * p * (1 + t)
    extra = len(raw) - 16 - 8 * n
    if extra not in (0, 8):
        raise ValueError(f"{path}: basis file size does not match p={p}, t={t}")
    body = np.frombuffer(raw, dtype="<f8", count=n, offset=16).astype(np.float64)
    energy = struct.unpack_from("<d", raw, 16 + 8 * n)[0] if extra else float("nan")
    d = p * p
    return PcaBasis(body[:d], body[d:].reshape(t, d), float(energy))
