"""Shared fixtures: tiny synthetic ultrasound-like corpora."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image


def blob_pair(rng: np.random.Generator, size: int = 64,
              radius_range: tuple[int, int] = (6, 14)) -> tuple[np.ndarray, np.ndarray]:
    """Speckled grayscale image with one bright elliptical lesion + its mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    ry = int(rng.integers(*radius_range))
    rx = int(rng.integers(*radius_range))
    mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.uint8)
    image = rng.normal(90, 25, size=(size, size))
    image = np.where(mask, image + 110, image)
    image = np.clip(image, 0, 255).astype(np.uint8)
    return image, mask


def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def make_busi_tree(root: Path, n_benign: int = 6, n_malignant: int = 4,
                   n_normal: int = 2, size: int = 64, seed: int = 7,
                   multi_mask_first: bool = True) -> Path:
    """Create a BUSI-layout corpus of synthetic blobs."""
    rng = np.random.default_rng(seed)
    for label, count in (("benign", n_benign), ("malignant", n_malignant),
                         ("normal", n_normal)):
        for idx in range(1, count + 1):
            image, mask = blob_pair(rng, size)
            if label == "normal":
                mask = np.zeros_like(mask)
            stem = f"{label} ({idx})"
            write_png(root / label / f"{stem}.png", image)
            if label == "benign" and idx == 1 and multi_mask_first:
                half = mask.copy()
                half[:, mask.shape[1] // 2:] = 0
                other = mask & ~half
                write_png(root / label / f"{stem}_mask.png", half * 255)
                write_png(root / label / f"{stem}_mask_1.png", other * 255)
            else:
                write_png(root / label / f"{stem}_mask.png", mask * 255)
    return root


def make_flat_tree(root: Path, count: int = 5, size: int = 64, seed: int = 11) -> Path:
    """Create a flat corpus with parallel images/ and masks/ directories."""
    rng = np.random.default_rng(seed)
    for idx in range(1, count + 1):
        image, mask = blob_pair(rng, size)
        write_png(root / "images" / f"case{idx:03d}.png", image)
        write_png(root / "masks" / f"case{idx:03d}.png", mask * 255)
    return root


@pytest.fixture
def busi_root(tmp_path: Path) -> Path:
    return make_busi_tree(tmp_path / "busi")


@pytest.fixture
def flat_root(tmp_path: Path) -> Path:
    return make_flat_tree(tmp_path / "flat")
