"""Dataset manifests, preprocessing, augmentation and the stratified split."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

SPLITS = ("train", "val", "test")
LABEL_TOKENS = {"0": 0, "1": 1, "negative": 0, "positive": 1}


class DataError(ValueError):
    """Bad manifest contents or undecodable images."""


@dataclass(frozen=True)
class Record:
    image_path: str
    label: int
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[Record]
    root: str = "."

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise DataError(f"duplicate image path {r.image_path!r}")
            seen.add(r.image_path)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> list[Record]:
        return [r for r in self.records if r.split == split]

    def labels(self, split: str | None = None) -> np.ndarray:
        recs = self.records if split is None else self.subset(split)
        return np.array([r.label for r in recs], dtype=np.int64)

    def resolve(self, record: Record) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else Path(self.root) / p

    def counts(self) -> dict[str, int]:
        pos = sum(r.label for r in self.records)
        return {"total": len(self.records), "positive": pos, "negative": len(self.records) - pos}


def load_manifest(path: str | os.PathLike, verify_images: bool = True) -> DatasetManifest:
    """Parse a ``path,label[,split]`` CSV.

    Relative image paths resolve against the manifest's directory. Labels are
    ``0``/``1`` or ``negative``/``positive``. Every file must exist and, with
    ``verify_images``, decode.
    """
    path = Path(path)
    root = path.parent
    records: list[Record] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:2] != ["path", "label"] or len(header) > 3 or (len(header) == 3 and header[2] != "split"):
            raise DataError(f"{path}: header must be 'path,label[,split]', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            img, tok = row[0].strip(), row[1].strip().lower()
            if tok not in LABEL_TOKENS:
                raise DataError(f"{path}:{lineno}: unknown label {row[1]!r} (use 0/1 or negative/positive)")
            split = row[2].strip().lower() if len(row) == 3 and row[2].strip() else None
            if split is not None and split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {row[2]!r}")
            full = Path(img) if Path(img).is_absolute() else root / img
            if not full.is_file():
                raise DataError(f"{path}:{lineno}: image file not found: {full}")
            if verify_images:
                try:
                    read_image(full)
                except Exception as exc:  # noqa: BLE001
                    raise DataError(f"{path}:{lineno}: cannot decode {full}: {exc}") from None
            records.append(Record(img, LABEL_TOKENS[tok], split))
    try:
        return DatasetManifest(records, root=str(root))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for r in manifest.records:
            w.writerow([r.image_path, r.label, r.split or ""])


# -- splitting ------------------------------------------------------------------------
def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _apportion(total: int, sizes: Sequence[int]) -> list[int]:
    """Largest-remainder allocation of ``total`` proportional to ``sizes``."""
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def split_counts(n: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    val = _round_half_up(ratios[1] * n)
    test = _round_half_up(ratios[2] * n)
    return n - val - test, val, test


def split_dataset(manifest: DatasetManifest, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> DatasetManifest:
    """Seeded, label-stratified train/val/test assignment.

    Val and test sizes are ``round(ratio * N)`` (half up); train takes the
    remainder. Each split's share is apportioned across labels by largest
    remainder so per-split class balance tracks the global balance.
    """
    n = len(manifest)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataError(f"ratios must be non-negative and sum to 1, got {ratios}")
    _, n_val, n_test = split_counts(n, ratios)
    rng = np.random.default_rng(seed)
    by_label = {lab: [i for i, r in enumerate(manifest.records) if r.label == lab] for lab in (0, 1)}
    labels = [lab for lab in (0, 1) if by_label[lab]]
    sizes = [len(by_label[lab]) for lab in labels]
    val_alloc = _apportion(n_val, sizes)
    test_alloc = _apportion(n_test, sizes)
    assignment: dict[int, str] = {}
    for lab, nv, nt in zip(labels, val_alloc, test_alloc):
        idx = np.array(by_label[lab])[rng.permutation(len(by_label[lab]))]
        for k, i in enumerate(idx):
            assignment[int(i)] = "val" if k < nv else "test" if k < nv + nt else "train"
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    return DatasetManifest(records, root=manifest.root)


# -- image decode and preprocessing ------------------------------------------------------
def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG (8/16-bit) or JPEG as a 2-D grayscale array.

    8-bit images come back as uint8, 16-bit as uint16; colour images are
    reduced by channel mean (float32 on the 0-255 scale).
    """
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.int64)
            return np.clip(arr, 0, 65535).astype(np.uint16)
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        if im.mode == "F":
            return np.asarray(im, dtype=np.float32)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
        return rgb.mean(axis=2)


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: tuple[int, int] = (224, 224)
    corner_fraction: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.corner_fraction < 0.5:
            raise ValueError(f"corner_fraction must lie in (0, 0.5), got {self.corner_fraction}")


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float32 2-D array to ``(height, width)``."""
    h, w = size
    if img.shape == (h, w):
        return img.astype(np.float32, copy=True)
    out = Image.fromarray(img.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.array(out, dtype=np.float32)


def corner_box(size: tuple[int, int], fraction: float) -> tuple[int, int]:
    return math.ceil(size[0] * fraction), math.ceil(size[1] * fraction)


def preprocess(image: np.ndarray, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Resize, impute the top corners with the image mean, scale to [0, 1].

    Returns a float32 array of shape ``(1, 1, H, W)``. uint16 input is scaled
    by 65535; anything else is taken to be on the 8-bit scale.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError(f"preprocess expects a 2-D grayscale image, got shape {img.shape}")
    if img.size == 0:
        raise DataError("preprocess got an empty image")
    full_scale = 65535.0 if img.dtype == np.uint16 else 255.0
    out = resize_bilinear(img.astype(np.float32), spec.target_size)
    mu = out.mean(dtype=np.float64).astype(np.float32)
    ch, cw = corner_box(spec.target_size, spec.corner_fraction)
    out[:ch, :cw] = mu
    out[:ch, -cw:] = mu
    out = np.clip(out / np.float32(full_scale), 0.0, 1.0)
    return out.reshape(1, 1, *spec.target_size)


def load_images(manifest: DatasetManifest, records: Sequence[Record],
                spec: PreprocessSpec = PreprocessSpec(), threads: int | None = None) -> np.ndarray:
    """Decode and preprocess ``records`` into an (N, 1, H, W) float32 batch."""
    if not records:
        return np.zeros((0, 1, *spec.target_size), dtype=np.float32)

    def one(r: Record) -> np.ndarray:
        return preprocess(read_image(manifest.resolve(r)), spec)[0]

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            arrs = list(pool.map(one, records))
    else:
        arrs = [one(r) for r in records]
    return np.stack(arrs).astype(np.float32)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("TBNET_THREADS", "1")))
    except ValueError:
        return 1


# -- augmentation -----------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width
    contrast: float = 1.0
    shift: float = 0.0


IDENTITY_AUGMENT = AugmentParams()


def sample_augment_params(rng: np.random.Generator, size: tuple[int, int],
                          max_crop: float = 0.10, max_contrast: float = 0.20,
                          max_shift: float = 0.10) -> AugmentParams:
    h, w = size
    flip = bool(rng.random() < 0.5)
    ch = int(rng.integers(math.ceil((1 - max_crop) * h), h + 1))
    cw = int(rng.integers(math.ceil((1 - max_crop) * w), w + 1))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    contrast = float(rng.uniform(1 - max_contrast, 1 + max_contrast))
    shift = float(rng.uniform(-max_shift, max_shift))
    return AugmentParams(flip, (top, left, ch, cw), contrast, shift)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply flip, crop-and-resize, contrast and intensity shift to ``(..., H, W)``."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[-2:]
    lead = img.shape[:-2]
    planes = img.reshape(-1, h, w)
    out = np.empty_like(planes)
    for i, p in enumerate(planes):
        if params.flip:
            p = p[:, ::-1]
        if params.crop is not None and params.crop != (0, 0, h, w):
            top, left, ch, cw = params.crop
            p = resize_bilinear(np.ascontiguousarray(p[top:top + ch, left:left + cw]), (h, w))
        if params.contrast != 1.0:
            m = p.mean(dtype=np.float64).astype(np.float32)
            p = (p - m) * np.float32(params.contrast) + m
        if params.shift != 0.0:
            p = p + np.float32(params.shift)
        out[i] = np.clip(p, 0.0, 1.0)
    return out.reshape(*lead, h, w)


def augment(image: np.ndarray, seed) -> np.ndarray:
    """Random flip / crop / contrast / intensity augmentation, deterministic in ``seed``.

    ``seed`` may be an int or a tuple such as ``(global_seed, sample_index, epoch)``.
    """
    img = np.asarray(image, dtype=np.float32)
    rng = np.random.default_rng(seed)
    return apply_augment(img, sample_augment_params(rng, img.shape[-2:]))


def augment_batch(batch: np.ndarray, seeds: Iterable) -> np.ndarray:
    return np.stack([augment(x, s) for x, s in zip(batch, seeds)]).astype(np.float32)
