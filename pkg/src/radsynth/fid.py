"""Frechet distance between Gaussians fitted to feature sets.

The trace term uses the symmetric product form
sqrt(sqrt(Sa) Sb sqrt(Sa)) with an eigendecomposition-based PSD square
root, which keeps everything real for rank-deficient covariances (small
sample counts give those routinely).
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, MathError, ShapeError
from .features import FeatureSet


@dataclass
class GaussianStats:
    mu: np.ndarray  # (D,)
    sigma: np.ndarray  # (D, D), symmetric PSD up to rounding

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.ndim != 1 or self.sigma.shape != (self.mu.size, self.mu.size):
            raise ShapeError(f"inconsistent Gaussian dims: mu {self.mu.shape}, sigma {self.sigma.shape}")


def fit_gaussian(fs: FeatureSet) -> GaussianStats:
    """Sample mean and (N-1)-normalized covariance, symmetrized."""
    x = fs.features
    if np.isnan(x).any():
        raise DataError("features contain NaN entries")
    n = x.shape[0]
    mu = x.mean(axis=0)
    if n == 1:
        warnings.warn("single feature row: covariance is zero")
        sigma = np.zeros((x.shape[1], x.shape[1]))
    else:
        xc = x - mu
        sigma = xc.T @ xc / (n - 1)
        sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu, sigma)


def matrix_sqrt_psd(m) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below 1e-8 * max are
    treated as zero (floating-point PSD drift)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > 1e-8 * scale:
        raise MathError("matrix_sqrt_psd requires a symmetric matrix")
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.where(w < 1e-8 * max(w.max(), 0.0), 0.0, w)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 sqrt(sqrt(Sa) Sb sqrt(Sa))).

    The cross trace equals the nuclear norm of sqrt(Sa) @ sqrt(Sb), which
    is what gets evaluated: the singular values of the root product are
    exactly the eigenvalue square roots of the symmetric product, without
    squaring away the small ones first.
    """
    if a.mu.size != b.mu.size:
        raise ShapeError(f"feature dims differ: {a.mu.size} vs {b.mu.size}")
    diff = a.mu - b.mu
    root_product = matrix_sqrt_psd(a.sigma) @ matrix_sqrt_psd(b.sigma)
    cross = np.linalg.svd(root_product, compute_uv=False).sum()
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    if value < -1e-6:
        raise MathError(f"Frechet distance came out {value}, well below zero")
    return max(value, 0.0)


def fid_score(real: FeatureSet, candidate: FeatureSet) -> float:
    if real.descriptor != candidate.descriptor:
        raise ConfigError(f"extractor mismatch: {real.descriptor!r} vs {candidate.descriptor!r}")
    return frechet_distance(fit_gaussian(candidate), fit_gaussian(real))


def fid_report(real: FeatureSet, candidates) -> list:
    """One (label, reference label, score) row per candidate set."""
    rows = []
    for cand in candidates:
        rows.append((cand.label, real.label, fid_score(real, cand)))
    return rows


def write_fid_report(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["data", "reference", "fid"])
        for label, ref, score in rows:
            writer.writerow([label, ref, f"{score:.6f}"])
