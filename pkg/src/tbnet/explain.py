"""Critical-factor masks by occlusion probing.

Each patch position is filled with the image mean and the drop in the
predicted class's probability is recorded. A pixel's score is the largest
drop among the patches covering it; the mask keeps pixels whose score is at
least ``threshold`` times the largest drop. This is a perturbation-based
approximation of the generator-inquisitor explanation workflow, evaluated at
the input layer only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ProbeSpec:
    patch_size: int = 16
    stride: int = 8
    threshold: float = 0.5
    batch_size: int = 32

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if self.stride > self.patch_size:
            raise ValueError(f"stride {self.stride} > patch_size {self.patch_size} leaves gaps")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in (0, 1], got {self.threshold}")


@dataclass
class CriticalFactorMask:
    mask: np.ndarray          # bool (H, W)
    drop_map: np.ndarray      # float32 (H, W)
    predicted_class: int
    base_score: float
    spec: ProbeSpec


def patch_origins(size: int, patch: int, stride: int) -> list[int]:
    """Top-left offsets along one axis; a final flush position covers any remainder."""
    if patch >= size:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _as_predict_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    return model


def threshold_mask(drop_map: np.ndarray, threshold: float) -> np.ndarray:
    peak = float(drop_map.max())
    if peak <= 0:
        return np.zeros(drop_map.shape, dtype=bool)
    return drop_map >= threshold * peak


def explain(model, image: np.ndarray, spec: ProbeSpec = ProbeSpec()) -> CriticalFactorMask:
    """Occlusion-probe ``model`` around one preprocessed image.

    ``model`` is a Network or any callable mapping an (N, 1, H, W) batch to
    (N, 2) probabilities. ``image`` is (H, W), (1, H, W) or (1, 1, H, W).
    The number of forward passes equals the number of patch positions plus one.
    """
    predict = _as_predict_fn(model)
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[-2:]
    if img.size != h * w:
        raise ValueError(f"explain takes a single-channel image, got shape {img.shape}")
    img = img.reshape(1, 1, h, w)

    base = predict(img)[0]
    cls = int(base[1] > base[0])
    base_score = float(base[cls])
    fill = np.float32(img.mean(dtype=np.float64))

    positions = [(r, c) for r in patch_origins(h, spec.patch_size, spec.stride)
                 for c in patch_origins(w, spec.patch_size, spec.stride)]
    p = spec.patch_size
    drop_map = np.full((h, w), -np.inf, dtype=np.float32)
    for start in range(0, len(positions), spec.batch_size):
        chunk = positions[start:start + spec.batch_size]
        batch = np.repeat(img, len(chunk), axis=0)
        for k, (r, c) in enumerate(chunk):
            batch[k, 0, r:r + p, c:c + p] = fill
        scores = predict(batch)[:, cls]
        for (r, c), s in zip(chunk, scores):
            region = drop_map[r:r + p, c:c + p]
            np.maximum(region, np.float32(base_score - s), out=region)
    drop_map[~np.isfinite(drop_map)] = 0.0
    return CriticalFactorMask(threshold_mask(drop_map, spec.threshold), drop_map, cls, base_score, spec)


# -- output -------------------------------------------------------------------------
OVERLAY_COLOR = (255, 0, 0)
OVERLAY_ALPHA = 0.5


def overlay_rgb(image: np.ndarray, mask: np.ndarray, alpha: float = OVERLAY_ALPHA,
                color: tuple[int, int, int] = OVERLAY_COLOR) -> np.ndarray:
    """uint8 RGB rendering of a [0, 1] grayscale image with ``mask`` tinted."""
    g = np.clip(np.asarray(image, dtype=np.float64).reshape(mask.shape), 0.0, 1.0) * 255.0
    rgb = np.repeat(g[..., None], 3, axis=2)
    tint = np.asarray(color, dtype=np.float64)
    rgb[mask] = (1 - alpha) * rgb[mask] + alpha * tint
    return np.rint(rgb).astype(np.uint8)


def render_overlay(image: np.ndarray, mask: np.ndarray, out_path: str | os.PathLike,
                   alpha: float = OVERLAY_ALPHA) -> None:
    """Write ``mask`` alpha-blended over the grayscale ``image`` as a PNG."""
    out_path = Path(out_path)
    if not out_path.parent.exists():
        raise OSError(f"cannot write {out_path}: directory does not exist")
    Image.fromarray(overlay_rgb(image, np.asarray(mask, dtype=bool), alpha), mode="RGB").save(out_path, format="PNG")


def dump_drop_map(result: CriticalFactorMask, prefix: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<prefix>.f32`` (raw little-endian float32, row-major) and ``<prefix>.json``."""
    prefix = Path(prefix)
    raw = prefix.with_name(prefix.name + ".f32")
    side = prefix.with_name(prefix.name + ".json")
    h, w = result.drop_map.shape
    raw.write_bytes(np.ascontiguousarray(result.drop_map, dtype="<f4").tobytes())
    side.write_text(json.dumps({"width": w, "height": h, "patch": result.spec.patch_size,
                                "stride": result.spec.stride}) + "\n", encoding="utf-8")
    return raw, side


def load_drop_map(prefix: str | os.PathLike) -> np.ndarray:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(prefix.name + ".json").read_text(encoding="utf-8"))
    data = np.fromfile(prefix.with_name(prefix.name + ".f32"), dtype="<f4")
    return data.reshape(meta["height"], meta["width"])
