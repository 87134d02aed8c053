"""Synthetic face and corpus generators for tests, self-checks and toy
training runs. No real photographs are bundled with the package."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import imaging
from .landmarks import MASKABLE_PARTS, canonical_landmarks, part_polygon
from .dataprep import facial_part_mask


def _skin_base(rng, size):
    """Smooth skin-like background with mild texture so edge detection has
    something to find."""
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base = np.stack([
        0.78 + 0.10 * ys - 0.05 * xs,
        0.62 + 0.08 * ys - 0.04 * xs,
        0.52 + 0.06 * ys - 0.03 * xs,
    ], axis=-1)
    # low-frequency blotches plus a faint stripe pattern
    fy, fx = rng.uniform(2, 5, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    tex = 0.06 * np.sin(2 * np.pi * fy * ys + phase[0]) * np.sin(2 * np.pi * fx * xs + phase[1])
    stripes = 0.05 * np.sin(2 * np.pi * rng.uniform(6, 10) * (0.3 * xs + 0.7 * ys) + rng.uniform(0, 6))
    img = base + (tex + stripes)[..., None] * np.array([1.0, 0.9, 0.8])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_blank_face(seed: int = 0, size: int = 256) -> np.ndarray:
    """A textured part-free face: what the inpainting target looks like."""
    rng = np.random.default_rng(seed)
    return _skin_base(rng, size)


def synthetic_face(seed: int = 0, size: int = 256):
    """A textured face with dark facial parts drawn at the canonical
    landmark positions. Returns (image, landmarks)."""
    rng = np.random.default_rng(seed)
    img = _skin_base(rng, size)
    lm = canonical_landmarks(size)
    colors = {
        "right_eyebrow": (0.25, 0.18, 0.12),
        "left_eyebrow": (0.25, 0.18, 0.12),
        "right_eye": (0.15, 0.12, 0.10),
        "left_eye": (0.15, 0.12, 0.10),
        "nose": (0.55, 0.40, 0.32),
        "mouth": (0.65, 0.25, 0.25),
    }
    for sub, color in colors.items():
        poly = imaging.fill_polygon(part_polygon(lm, sub), size, size).astype(bool)
        img[poly] = color
    return img, lm


def write_toy_corpus(out_dir, n: int = 6, size: int = 256, seed: int = 0) -> Path:
    """Write n synthetic faces, landmark files and an ingest manifest."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "corpus"
    lm_dir = out_dir / "landmarks"
    images_dir.mkdir(parents=True, exist_ok=True)
    lm_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        img, lm = synthetic_face(seed + i, size)
        name = f"face{i:03d}"
        imaging.save_image_rgb(images_dir / f"{name}.png", img)
        with open(lm_dir / f"{name}.json", "w") as f:
            json.dump([[float(x), float(y)] for x, y in lm], f)
        lines.append(json.dumps({
            "image": f"{name}.png",
            "landmarks": f"{name}.json",
            "has_glasses": False,
            "has_hat": False,
            "forehead_occluded": False,
        }))
    with open(images_dir / "manifest.jsonl", "w") as f:
        f.write("\n".join(lines) + "\n")
    return out_dir


def toy_blank_set(n: int = 8, size: int = 64, seed: int = 0):
    """Blank faces plus part-shaped hole masks at toy resolution, as arrays.

    Used by the overfit sanity runs: images are mirror-symmetric stitched
    textures, masks come from scaled canonical part polygons.
    """
    images, masks = [], []
    lm = canonical_landmarks(size)
    for i in range(n):
        rng = np.random.default_rng(seed + 100 + i)
        top = _skin_base(rng, size)[: size // 2]
        images.append(np.concatenate([top, top[::-1]], axis=0))
        parts = [["eyes", "mouth"], ["eyes", "nose", "mouth"], ["eyebrows", "eyes"],
                 ["eyes", "nose"]][i % 4]
        masks.append(facial_part_mask(lm, parts, dilation_radius=max(2, size // 32),
                                      height=size, width=size))
    return images, masks
