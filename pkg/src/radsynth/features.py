"""Pluggable feature extraction for the objective metrics.

Pretrained backbones are deliberately not bundled; the built-ins are raw
pixels and a fixed-seed random two-stage conv net, and externally
extracted features can be ingested from CSV. Every extractor carries a
descriptor string so sets from different extractors cannot be compared
silently.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, FormatError


@dataclass
class FeatureSet:
    features: np.ndarray  # (N, D) float64
    label: str
    descriptor: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DataError(f"features must be a non-empty (N, D) matrix, got {self.features.shape}")
        if np.isnan(self.features).any():
            raise DataError("features contain NaN entries")


def _as_batch(images):
    """Accept (N,H,W) uint8/float or (N,1,H,W); return (N,1,H,W) float64 in [-1,1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise DataError(f"expected (N, H, W) or (N, 1, H, W) grayscale images, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) * (2.0 / 255.0) - 1.0
    else:
        arr = arr.astype(np.float64)
    return arr


class PixelExtractor:
    """Flattened intensities; D = H*W."""

    def __init__(self):
        self.descriptor = None  # finalized on first use (needs the image size)

    def __call__(self, images, label):
        batch = _as_batch(images)
        n, _, h, w = batch.shape
        desc = f"pixel:{h}x{w}"
        if self.descriptor is None:
            self.descriptor = desc
        elif self.descriptor != desc:
            raise ConfigError(f"extractor already bound to {self.descriptor}, got {desc}")
        return FeatureSet(batch.reshape(n, h * w), label, desc)


class RandomConvExtractor:
    """Two fixed random conv stages (stride 2, ReLU) and global average
    pooling; weights depend only on the seed, so the features are a
    deterministic function of the image."""

    def __init__(self, seed=0, channels=(32, 64), ksize=3):
        self.seed = seed
        self.channels = tuple(channels)
        self.ksize = ksize
        rng = np.random.default_rng(seed)
        c1, c2 = self.channels
        k = ksize
        self.w1 = rng.normal(0.0, np.sqrt(2.0 / (k * k)), size=(c1, 1, k, k))
        self.w2 = rng.normal(0.0, np.sqrt(2.0 / (c1 * k * k)), size=(c2, c1, k, k))
        self.descriptor = f"random_conv:seed={seed},c={c1}-{c2},k={k}"

    def _conv(self, x, w):
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        cols = _kernels.im2col(x, kh, kw, 2, 2, 1, 1)
        oh = (h + 2 - kh) // 2 + 1
        ow = (wd + 2 - kw) // 2 + 1
        out = w.reshape(f, -1) @ cols
        return out.reshape(n, f, oh, ow)

    def __call__(self, images, label):
        x = _as_batch(images)
        x = np.maximum(self._conv(x, self.w1), 0.0)
        x = np.maximum(self._conv(x, self.w2), 0.0)
        feats = x.mean(axis=(2, 3))
        return FeatureSet(feats, label, self.descriptor)


def get_extractor(name, seed=0):
    if name == "pixel":
        return PixelExtractor()
    if name == "random_conv":
        return RandomConvExtractor(seed=seed)
    raise ConfigError(f"unknown extractor {name!r} (expected 'pixel' or 'random_conv')")


def extract_features(images, extractor, label="") -> FeatureSet:
    """Run a built-in or custom extractor over an image stack."""
    if isinstance(extractor, str):
        extractor = get_extractor(extractor)
    return extractor(images, label)


# ---------------------------------------------------------------------------
# CSV interchange: one row per image, metadata in comment lines
# ---------------------------------------------------------------------------

def write_features_csv(fs: FeatureSet, path):
    n, d = fs.features.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# extractor: {fs.descriptor}\n")
        fh.write(f"# label: {fs.label}\n")
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(d)])
        for row in fs.features:
            writer.writerow([f"{v:.17g}" for v in row])


def read_features_csv(path) -> FeatureSet:
    descriptor = ""
    label = ""
    rows = []
    header = None
    with open(path, newline="") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("extractor:"):
                    descriptor = body[len("extractor:"):].strip()
                elif body.startswith("label:"):
                    label = body[len("label:"):].strip()
                continue
            if not line:
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                continue
            if len(parts) != len(header):
                raise FormatError(f"{path}: row has {len(parts)} fields, header has {len(header)}")
            rows.append([float(v) for v in parts])
    if header is None or not rows:
        raise FormatError(f"{path}: no feature rows found")
    return FeatureSet(np.array(rows, dtype=np.float64), label, descriptor)
