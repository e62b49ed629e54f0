"""Image ingestion and augmented crop datasets.

Source images are converted to BT.601 luminance in [0, 1]; crops are drawn
with random scaling, position, and horizontal flipping, all reproducible
from a single seed. Each crop records its provenance so augmentations can be
re-derived from the source image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# BT.601 luminance weights.
_LUMA = np.array([0.299, 0.587, 0.114])


def load_grayscale(path) -> np.ndarray:
    """Decode an image to a float64 luminance array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ _LUMA
    return arr / 255.0


def resize_image(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a [0, 1] grayscale array to (height, width)."""
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    resized = img.resize((size[1], size[0]), resample=Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64)


@dataclass(frozen=True)
class CropRecord:
    """Provenance of one augmented crop."""

    source_index: int
    scaled_size: tuple[int, int]
    top: int
    left: int
    flipped: bool


@dataclass
class CropDataset:
    crops: np.ndarray  # (count, crop, crop) float32 in [0, 1]
    records: list[CropRecord]
    source_paths: list[Path]

    def __len__(self) -> int:
        return len(self.records)


def list_images(data_dir) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def build_dataset(data_dir, crop: int, count: int, seed: int = 0) -> CropDataset:
    """Draw `count` augmented crops of side `crop` from the images in a dir.

    Undecodable files are reported and skipped; the build fails only when no
    image decodes. Deterministic for a fixed seed and directory contents.
    """
    paths = list_images(data_dir)
    sources = []
    kept_paths = []
    for p in paths:
        try:
            sources.append(load_grayscale(p))
            kept_paths.append(p)
        except Exception as err:  # undecodable file: report, keep going
            print(f"skipping {p}: {err}")
    if not sources:
        raise ValueError(f"no decodable images in {data_dir}")

    rng = np.random.default_rng(seed)
    crops = np.empty((count, crop, crop), dtype=np.float32)
    records = []
    for i in range(count):
        idx = int(rng.integers(len(sources)))
        src = sources[idx]
        h, w = src.shape
        lo = max(0.5, crop / h, crop / w)
        hi = max(1.0, lo)
        scale = float(rng.uniform(lo, hi))
        new_h = max(crop, round(h * scale))
        new_w = max(crop, round(w * scale))
        scaled = resize_image(src, (new_h, new_w))
        top = int(rng.integers(0, new_h - crop + 1))
        left = int(rng.integers(0, new_w - crop + 1))
        flipped = bool(rng.random() < 0.5)
        window = scaled[top : top + crop, left : left + crop]
        if flipped:
            window = window[:, ::-1]
        crops[i] = window
        records.append(CropRecord(idx, (new_h, new_w), top, left, flipped))
    return CropDataset(crops=crops, records=records, source_paths=kept_paths)


def reapply_record(dataset: CropDataset, i: int) -> np.ndarray:
    """Recompute crop i from its source image and provenance record."""
    rec = dataset.records[i]
    src = load_grayscale(dataset.source_paths[rec.source_index])
    scaled = resize_image(src, rec.scaled_size)
    crop = dataset.crops.shape[1]
    window = scaled[rec.top : rec.top + crop, rec.left : rec.left + crop]
    if rec.flipped:
        window = window[:, ::-1]
    return window
