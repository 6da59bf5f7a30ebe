"""Dataset ingestion, manifests, preprocessing, and fold planning.

Two corpus layouts are supported: the BUSI layout (one directory per
class, masks next to images as ``<stem>_mask*.<ext>``) and flat layouts
(parallel image/mask directories or the same suffix convention in a
single directory). Manifests and fold plans persist as line-oriented
tab-separated text and regenerate byte-identically.
"""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
CLASS_LABELS = ("benign", "malignant", "normal", "unlabeled")
MASK_TOKEN = "_mask"


@dataclass(frozen=True)
class Sample:
    """One image with all of its mask files."""

    id: str
    image_path: str
    mask_paths: tuple[str, ...]
    class_label: str = "unlabeled"
    source: str = ""

    def __post_init__(self):
        if not self.mask_paths:
            raise DataError(f"sample {self.id!r} has no masks")
        if self.class_label not in CLASS_LABELS:
            raise DataError(f"sample {self.id!r} has unknown class {self.class_label!r}")


@dataclass
class DatasetManifest:
    """Normalized record of a corpus."""

    samples: list[Sample]
    source: str = ""
    options: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.class_label] = counts.get(s.class_label, 0) + 1
        return counts

    def filtered(self, class_label: str | None) -> list[Sample]:
        if class_label is None:
            return list(self.samples)
        return [s for s in self.samples if s.class_label == class_label]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"sample id {sample_id!r} not in manifest")

    def to_text(self) -> str:
        lines = ["# nunet manifest v1", f"# source: {self.source}"]
        for key in sorted(self.options):
            lines.append(f"# option {key} = {self.options[key]}")
        lines.append("# columns: id\timage_path\tmask_paths\tclass\tsource")
        for s in sorted(self.samples, key=lambda s: s.id):
            masks = ";".join(s.mask_paths)
            lines.append(f"{s.id}\t{s.image_path}\t{masks}\t{s.class_label}\t{s.source}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        source = ""
        options: dict[str, str] = {}
        samples = []
        for raw in text.splitlines():
            if raw.startswith("# source:"):
                source = raw.split(":", 1)[1].strip()
                continue
            if raw.startswith("# option "):
                key, value = raw[len("# option "):].split("=", 1)
                options[key.strip()] = value.strip()
                continue
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) != 5:
                raise DataError(f"malformed manifest line: {raw!r}")
            sid, image_path, masks, class_label, src = parts
            samples.append(Sample(id=sid, image_path=image_path,
                                  mask_paths=tuple(masks.split(";")),
                                  class_label=class_label, source=src))
        return cls(samples=samples, source=source, options=options)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_text(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _check_readable(path: Path) -> None:
    try:
        with Image.open(path) as img:
            img.verify()
    except Exception as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def _is_image(path: Path) -> bool:
    return path.suffix.lower() in IMAGE_EXTENSIONS


def ingest_busi(root_dir: str | Path, include_normal: bool = False,
                verify: bool = True) -> DatasetManifest:
    """Ingest a BUSI-layout corpus.

    Each class subdirectory holds images and ``<stem>_mask*`` companion
    files; every image is paired with all of its masks. Normal cases are
    excluded unless `include_normal` is set.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    classes = ["benign", "malignant"] + (["normal"] if include_normal else [])
    samples = []
    for class_label in classes:
        class_dir = root / class_label
        if not class_dir.is_dir():
            continue
        files = sorted(p for p in class_dir.iterdir() if _is_image(p))
        images = [p for p in files if MASK_TOKEN not in p.stem]
        masks_by_stem: dict[str, list[Path]] = {}
        for p in files:
            if MASK_TOKEN in p.stem:
                stem = p.stem.split(MASK_TOKEN, 1)[0]
                masks_by_stem.setdefault(stem, []).append(p)
        for image in images:
            masks = sorted(masks_by_stem.get(image.stem, []))
            if not masks:
                raise DataError(f"image {image} has no {MASK_TOKEN}* companion file")
            if verify:
                _check_readable(image)
                for m in masks:
                    _check_readable(m)
            samples.append(Sample(
                id=f"{class_label}/{image.stem}",
                image_path=str(image),
                mask_paths=tuple(str(m) for m in masks),
                class_label=class_label,
                source="busi",
            ))
    if not samples:
        log.warning("no samples found under %s; manifest is empty", root)
    return DatasetManifest(samples=samples, source="busi",
                           options={"include_normal": str(include_normal).lower()})


def ingest_flat(root_dir: str | Path, images_dir: str = "images", masks_dir: str = "masks",
                mask_suffix: str = MASK_TOKEN, class_file: str | None = None,
                source: str = "flat", verify: bool = True) -> DatasetManifest:
    """Ingest a flat corpus.

    Uses parallel ``images/`` and ``masks/`` directories when both
    exist (matching by stem, or by stem + `mask_suffix`); otherwise
    falls back to the suffix convention inside `root_dir` itself.
    Unmatched images or masks abort with the orphans listed.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    img_root = root / images_dir
    mask_root = root / masks_dir

    pairs: dict[str, tuple[Path, list[Path]]] = {}
    if img_root.is_dir() and mask_root.is_dir():
        images = sorted(p for p in img_root.iterdir() if _is_image(p))
        masks = sorted(p for p in mask_root.iterdir() if _is_image(p))
        masks_by_stem: dict[str, list[Path]] = {}
        for m in masks:
            stem = m.stem.split(mask_suffix, 1)[0] if mask_suffix in m.stem else m.stem
            masks_by_stem.setdefault(stem, []).append(m)
        orphans_i = [str(p) for p in images if p.stem not in masks_by_stem]
        matched = {p.stem for p in images}
        orphans_m = [str(m) for stem, ms in masks_by_stem.items() if stem not in matched
                     for m in ms]
        if orphans_i or orphans_m:
            raise DataError(
                "image/mask mismatch: "
                f"images without masks {orphans_i[:5]}, masks without images {orphans_m[:5]}"
            )
        for p in images:
            pairs[p.stem] = (p, sorted(masks_by_stem[p.stem]))
    else:
        files = sorted(p for p in root.iterdir() if _is_image(p))
        images = [p for p in files if mask_suffix not in p.stem]
        masks_by_stem = {}
        for p in files:
            if mask_suffix in p.stem:
                stem = p.stem.split(mask_suffix, 1)[0]
                masks_by_stem.setdefault(stem, []).append(p)
        orphans_i = [str(p) for p in images if p.stem not in masks_by_stem]
        matched = {p.stem for p in images}
        orphans_m = [str(m) for stem, ms in masks_by_stem.items() if stem not in matched
                     for m in ms]
        if orphans_i or orphans_m:
            raise DataError(
                "image/mask mismatch: "
                f"images without masks {orphans_i[:5]}, masks without images {orphans_m[:5]}"
            )
        for p in images:
            pairs[p.stem] = (p, sorted(masks_by_stem[p.stem]))

    labels: dict[str, str] = {}
    if class_file is not None:
        for raw in Path(class_file).read_text().splitlines():
            if not raw.strip() or raw.startswith("#"):
                continue
            sid, label = raw.split("\t")
            labels[sid] = label.strip()

    samples = []
    for stem in sorted(pairs):
        image, masks = pairs[stem]
        if verify:
            _check_readable(image)
            for m in masks:
                _check_readable(m)
        samples.append(Sample(
            id=stem,
            image_path=str(image),
            mask_paths=tuple(str(m) for m in masks),
            class_label=labels.get(stem, "unlabeled"),
            source=source,
        ))
    if not samples:
        log.warning("no samples found under %s; manifest is empty", root)
    return DatasetManifest(samples=samples, source=source)


def _load_mask_array(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def merge_mask_arrays(masks: list[np.ndarray]) -> np.ndarray:
    """Pixelwise union of binary arrays of identical shape."""
    if not masks:
        raise DataError("cannot merge an empty mask list")
    out = np.zeros_like(masks[0], dtype=np.uint8)
    for m in masks:
        if m.shape != out.shape:
            raise ShapeError(f"mask shapes differ: {out.shape} vs {m.shape}")
        out |= (np.asarray(m) > 0).astype(np.uint8)
    return out


def merge_masks(mask_paths) -> np.ndarray:
    """Load mask files and return their pixelwise union in {0, 1}."""
    return merge_mask_arrays([_load_mask_array(p) for p in mask_paths])


def preprocess(sample: Sample, target_size: int = 256,
               divisor: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Convert a sample into model-ready arrays.

    The image becomes a single-channel float32 array of shape
    (1, target_size, target_size) scaled to [0, 1] via bilinear
    resampling; the mask union is nearest-resized and stays strictly
    binary.
    """
    if target_size % divisor != 0:
        raise ConfigError(
            f"target_size {target_size} violates the model contract: "
            f"H and W must be divisible by {divisor}"
        )
    with Image.open(sample.image_path) as img:
        gray = img.convert("L").resize((target_size, target_size), Image.BILINEAR)
    image = np.asarray(gray, dtype=np.float32) / 255.0

    mask = merge_masks(sample.mask_paths)
    mask_img = Image.fromarray(mask * 255).resize((target_size, target_size), Image.NEAREST)
    target = (np.asarray(mask_img) > 127).astype(np.float32)
    return image[None], target[None]


@dataclass
class FoldPlan:
    """Deterministic k-fold assignment over (a class subset of) a manifest."""

    k: int
    seed: int
    assignment: dict[str, int]
    class_filter: str | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"fold count must be >= 2, got {self.k}")
        folds = set(self.assignment.values())
        if folds and (min(folds) < 0 or max(folds) >= self.k):
            raise ConfigError(f"fold indices out of range for k={self.k}")

    @property
    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for fold in self.assignment.values():
            sizes[fold] += 1
        return sizes

    def test_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignment.items() if f != fold)

    def to_text(self) -> str:
        lines = [
            "# nunet fold plan v1",
            f"# k: {self.k}",
            f"# seed: {self.seed}",
            f"# class_filter: {self.class_filter or 'none'}",
            "# columns: id\tfold",
        ]
        for sid in sorted(self.assignment):
            lines.append(f"{sid}\t{self.assignment[sid]}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "FoldPlan":
        k = seed = None
        class_filter = None
        assignment: dict[str, int] = {}
        for raw in text.splitlines():
            if raw.startswith("# k:"):
                k = int(raw.split(":", 1)[1])
            elif raw.startswith("# seed:"):
                seed = int(raw.split(":", 1)[1])
            elif raw.startswith("# class_filter:"):
                value = raw.split(":", 1)[1].strip()
                class_filter = None if value == "none" else value
            elif raw and not raw.startswith("#"):
                sid, fold = raw.rsplit("\t", 1)
                assignment[sid] = int(fold)
        if k is None or seed is None:
            raise DataError("fold plan text is missing its k/seed header")
        return cls(k=k, seed=seed, assignment=assignment, class_filter=class_filter)

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_text(Path(path).read_text())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def make_folds(manifest: DatasetManifest, k: int, seed: int,
               class_filter: str | None = None) -> FoldPlan:
    """Seeded shuffle followed by round-robin fold assignment.

    Folds partition the (filtered) manifest with sizes differing by at
    most one; regeneration with identical inputs is byte-identical.
    """
    if k < 2:
        raise ConfigError(f"fold count must be >= 2, got {k}")
    ids = sorted(s.id for s in manifest.filtered(class_filter))
    if len(ids) < k:
        raise DataError(
            f"cannot split {len(ids)} sample(s) into {k} folds"
            + (f" (class filter {class_filter!r})" if class_filter else "")
        )
    rng = random.Random(seed)
    rng.shuffle(ids)
    assignment = {sid: pos % k for pos, sid in enumerate(ids)}
    return FoldPlan(k=k, seed=seed, assignment=assignment, class_filter=class_filter)
