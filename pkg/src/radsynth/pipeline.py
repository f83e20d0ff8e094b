"""Image ingestion and preprocessing: manifest screening, bottom-center
cropping, resizing, grayscale normalization, anisotropic-diffusion
denoising, and the Gaussian-noise baseline."""

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .errors import ConfigError, CropError, DataError
from .train import ArrayDataset


@dataclass
class RawImage:
    """8-bit grayscale image plus provenance."""
    pixels: np.ndarray  # (H, W) uint8
    source: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataError(f"RawImage needs a non-empty 2-D array, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise DataError(f"RawImage pixels must be uint8, got {self.pixels.dtype}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class CropSpec:
    width_fraction: float = 0.70
    height_fraction: float = 0.55
    bottom_margin_fraction: float = 0.02

    def validate(self):
        if not 0 < self.width_fraction <= 1 or not 0 < self.height_fraction <= 1:
            raise ConfigError("width/height fractions must lie in (0, 1]")
        if not 0 <= self.bottom_margin_fraction < 1:
            raise ConfigError("bottom_margin_fraction must lie in [0, 1)")


@dataclass
class ADParams:
    iterations: int = 20
    dt: float = 0.15
    kappa: float = 15.0
    conductance: str = "exponential"  # or "rational"

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 < self.dt <= 0.25:
            raise ConfigError(f"dt must lie in (0, 0.25] for explicit 4-neighbor stability, got {self.dt}")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.conductance not in ("exponential", "rational"):
            raise ConfigError(f"conductance must be 'exponential' or 'rational', got {self.conductance!r}")


@dataclass
class PreprocConfig:
    crop: CropSpec = field(default_factory=CropSpec)
    out_width: int = 256
    out_height: int = 256
    denoise: bool = False
    ad_params: ADParams = field(default_factory=ADParams)

    def validate(self):
        self.crop.validate()
        if self.out_width < 1 or self.out_height < 1:
            raise ConfigError("output size must be positive")
        self.ad_params.validate()


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_image(path):
    """Load an 8- or 16-bit grayscale PNG (16-bit is rescaled to 8-bit);
    color inputs are converted to luminance."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = np.floor(arr / 257.0 + 0.5)
            pixels = np.clip(arr, 0, 255).astype(np.uint8)
        else:
            pixels = np.asarray(im.convert("L"))
    return RawImage(pixels, source=str(path))


def save_image(img: RawImage, path):
    Image.fromarray(img.pixels, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# preprocessing steps
# ---------------------------------------------------------------------------

def crop_bottom_center(img: RawImage, spec: CropSpec) -> RawImage:
    """Horizontally centered rectangle whose lower edge sits at
    H*(1 - bottom_margin_fraction)."""
    spec.validate()
    w, h = img.width, img.height
    cw = int(round(spec.width_fraction * w))
    ch = int(round(spec.height_fraction * h))
    if cw < 1 or ch < 1:
        raise CropError(f"crop of {w}x{h} with fractions "
                        f"({spec.width_fraction}, {spec.height_fraction}) is sub-pixel")
    y1 = int(round(h * (1.0 - spec.bottom_margin_fraction)))
    y1 = min(max(y1, 1), h)
    y0 = max(y1 - ch, 0)
    x0 = max((w - cw) // 2, 0)
    x1 = min(x0 + cw, w)
    if y1 <= y0 or x1 <= x0:
        raise CropError("crop rectangle is empty after clamping")
    return RawImage(img.pixels[y0:y1, x0:x1].copy(), source=img.source)


def resize_bilinear(img: RawImage, width, height) -> RawImage:
    """Bilinear resample (half-pixel-centered), re-quantized round-half-up."""
    if width < 1 or height < 1:
        raise ConfigError("target size must be positive")
    if (img.width, img.height) == (width, height):
        return RawImage(img.pixels.copy(), source=img.source)
    out = _kernels.bilinear_resize(img.pixels.astype(np.float64), height, width)
    return RawImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8), source=img.source)


def normalize_grayscale(img: RawImage) -> np.ndarray:
    """Map 8-bit values to [-1, 1]: v -> 2v/255 - 1. Returns (1, H, W) float32."""
    arr = img.pixels.astype(np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)
    return arr[None, :, :]


def denormalize(tensor) -> RawImage:
    """Inverse of normalize_grayscale with round-half-up; exact on the
    8-bit lattice."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise DataError(f"expected a single-channel tensor, got shape {arr.shape}")
        arr = arr[0]
    elif arr.ndim != 2:
        raise DataError(f"expected a (H, W) or (1, H, W) tensor, got shape {arr.shape}")
    arr = np.clip(arr, -1.0, 1.0)
    vals = np.floor((arr + 1.0) * (255.0 / 2.0) + 0.5)
    return RawImage(np.clip(vals, 0, 255).astype(np.uint8))


def anisotropic_diffusion(img: RawImage, params: ADParams) -> RawImage:
    """Explicit Perona-Malik smoothing on 4-neighbor differences with
    replicated borders; internal state stays real-valued and is quantized
    once at the end."""
    params.validate()
    state = img.pixels.astype(np.float64)
    exponential = params.conductance == "exponential"
    for _ in range(params.iterations):
        state = _kernels.diffusion_step(state, params.kappa, params.dt, exponential)
    return RawImage(np.clip(np.floor(state + 0.5), 0, 255).astype(np.uint8), source=img.source)


def gaussian_noise_image(width, height, mu, sigma, seed) -> RawImage:
    """I.i.d. normal pixels clamped to [0, 255]; the noise-reference image."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    vals = rng.normal(mu, sigma, size=(height, width))
    return RawImage(np.clip(np.floor(vals + 0.5), 0, 255).astype(np.uint8))


def preprocess_image(img: RawImage, cfg: PreprocConfig) -> RawImage:
    cfg.validate()
    out = crop_bottom_center(img, cfg.crop)
    out = resize_bilinear(out, cfg.out_width, cfg.out_height)
    if cfg.denoise:
        out = anisotropic_diffusion(out, cfg.ad_params)
    return out


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image_id: str
    path: str
    included: bool
    notes: str = ""


class DatasetManifest:
    def __init__(self, entries):
        self.entries = list(entries)
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest image ids must be unique")

    @property
    def included(self):
        return [e for e in self.entries if e.included]

    def __len__(self):
        return len(self.entries)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "path", "included", "notes"])
            for e in self.entries:
                writer.writerow([e.image_id, e.path, int(e.included), e.notes])

    @classmethod
    def from_csv(cls, path):
        entries = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                entries.append(ManifestEntry(row["id"], row["path"],
                                             bool(int(row["included"])), row.get("notes", "")))
        return cls(entries)


def build_manifest(directory, exclude_list=()) -> DatasetManifest:
    """Scan a directory for PNGs in lexicographic order; excluded ids stay
    listed but flagged out, mirroring manual screening."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a readable directory")
    excluded = set()
    for image_id in exclude_list:
        if image_id in excluded:
            warnings.warn(f"duplicate exclusion for {image_id!r}")
        excluded.add(image_id)
    entries = []
    for path in sorted(directory.iterdir(), key=lambda p: p.name):
        if path.suffix.lower() != ".png":
            continue
        image_id = path.stem
        notes = ""
        included = image_id not in excluded
        if image_id in excluded:
            notes = "excluded"
        else:
            try:
                with Image.open(path) as im:
                    im.verify()
            except Exception as exc:
                included = False
                notes = f"unreadable: {exc}"
        entries.append(ManifestEntry(image_id, str(path), included, notes))
    return DatasetManifest(entries)


def preprocess_dataset(manifest: DatasetManifest, cfg: PreprocConfig, out_dir):
    """Run the crop/resize/denoise chain over every included image and
    write 8-bit PNGs named by image id. Returns output paths."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for entry in manifest.included:
        img = load_image(entry.path)
        out = preprocess_image(img, cfg)
        dest = out_dir / f"{entry.image_id}.png"
        save_image(out, dest)
        written.append(str(dest))
    return written


def load_folder_dataset(directory) -> ArrayDataset:
    """Load every PNG in a directory as a normalized (N, 1, H, W) dataset."""
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise DataError(f"no PNG files in {directory}")
    images = [normalize_grayscale(load_image(p)) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have inconsistent shapes: {sorted(shapes)}")
    return ArrayDataset(np.stack(images))
