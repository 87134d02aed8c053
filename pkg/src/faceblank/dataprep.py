"""Training-data synthesis: "blank face" images built by mirroring the
forehead, and facial-part hole masks built from landmark polygons.

The ingest manifest is JSON lines, one record per face::

    {"image": "...", "landmarks": "...", "has_glasses": false,
     "has_hat": false, "forehead_occluded": false}

The output manifest is a single JSON file listing image/mask pools per
split, the seed, and counts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .landmarks import (
    MASKABLE_PARTS,
    LandmarkError,
    eye_centers,
    eyebrow_top_row,
    interocular_distance,
    load_landmarks,
    part_polygon,
)

log = logging.getLogger(__name__)

IMAGE_SIZE = 256
FOREHEAD_SIZE = (128, 256)  # rows x cols
# disk radius for part-mask dilation: 5% of the aligned crop width
DEFAULT_DILATION_RADIUS = round(0.05 * IMAGE_SIZE)
DEFAULT_GLASSES_PROBABILITY = 0.3
MASK_FILL_MIN = 0.05
MASK_FILL_MAX = 0.70


class DataPrepError(ValueError):
    pass


class InsufficientForeheadError(DataPrepError):
    pass


@dataclass
class CorpusRecord:
    record_id: str
    image_path: str
    landmarks_path: str
    has_glasses: bool = False
    has_hat: bool = False
    forehead_occluded: bool = False

    @classmethod
    def from_json(cls, record_id, obj, corpus_dir="", landmarks_dir=""):
        return cls(
            record_id=record_id,
            image_path=str(Path(corpus_dir) / obj["image"]),
            landmarks_path=str(Path(landmarks_dir) / obj["landmarks"]),
            has_glasses=bool(obj.get("has_glasses", False)),
            has_hat=bool(obj.get("has_hat", False)),
            forehead_occluded=bool(obj.get("forehead_occluded", False)),
        )


def filter_corpus(records):
    """Keep only records free of glasses, hats and forehead occlusion."""
    kept = [r for r in records if not (r.has_glasses or r.has_hat or r.forehead_occluded)]
    if not kept:
        log.warning("corpus filter produced an empty record list")
    return kept


def crop_forehead(img, lm, hairline_row: float = 0.0) -> np.ndarray:
    """Crop the forehead band (full width, hairline row down to the topmost
    eyebrow landmark row) and resize it to 256 x 128.

    Expects an aligned face crop; hairline_row defaults to the crop's top
    edge.
    """
    img = imaging.validate_image(img)
    h, w = img.shape[:2]
    brow_row = eyebrow_top_row(lm)
    crop_h = brow_row - hairline_row
    if crop_h < 8:
        raise InsufficientForeheadError(
            f"forehead band is {crop_h:.1f} px tall (eyebrow row {brow_row:.1f}, "
            f"hairline row {hairline_row:.1f}); need at least 8"
        )
    out_h, out_w = FOREHEAD_SIZE
    sy = out_h / crop_h
    sx = out_w / w
    matrix = np.array([[sx, 0.0, 0.0], [0.0, sy, -hairline_row * sy]])
    return imaging.warp_affine(img, matrix, out_h, out_w)


def flip_stitch(forehead) -> np.ndarray:
    """Stack the 256 x 128 forehead on top of its vertical flip, producing a
    mirror-symmetric 256 x 256 blank face."""
    forehead = imaging.validate_image(forehead)
    if forehead.shape[:2] != FOREHEAD_SIZE:
        raise DataPrepError(
            f"expected {FOREHEAD_SIZE[0]} x {FOREHEAD_SIZE[1]} forehead image, got {forehead.shape[:2]}"
        )
    return np.concatenate([forehead, forehead[::-1]], axis=0)


def facial_part_mask(lm, parts, dilation_radius: int = DEFAULT_DILATION_RADIUS,
                     height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    """Union of filled landmark polygons for the requested parts, dilated
    once with a disk of the given radius."""
    for p in parts:
        if p not in MASKABLE_PARTS:
            raise LandmarkError(f"unknown facial part {p!r}; expected one of {sorted(MASKABLE_PARTS)}")
    mask = np.zeros((height, width), dtype=np.float32)
    for p in sorted(parts):
        for sub in MASKABLE_PARTS[p]:
            mask = np.maximum(mask, imaging.fill_polygon(part_polygon(lm, sub), height, width))
    if dilation_radius > 0 and mask.any():
        mask = imaging.dilate(mask, dilation_radius)
    return mask


def glasses_silhouette(lm, height: int = IMAGE_SIZE, width: int = IMAGE_SIZE) -> np.ndarray:
    """Synthetic glasses mask: an ellipse around each eye center joined by a
    bridge bar, sized from the inter-ocular distance."""
    r_eye, l_eye = eye_centers(lm)
    iod = interocular_distance(lm)
    rx, ry = 0.32 * iod, 0.22 * iod
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    mask = np.zeros((height, width), dtype=bool)
    for cx, cy in (r_eye, l_eye):
        mask |= ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    bar_h = 0.06 * iod
    cy = (r_eye[1] + l_eye[1]) / 2.0
    x0, x1 = min(r_eye[0], l_eye[0]), max(r_eye[0], l_eye[0])
    mask |= (xs >= x0) & (xs <= x1) & (np.abs(ys - cy) <= bar_h)
    return mask.astype(np.float32)


def augment_glasses(mask, lm, probability: float, rng_seed=None) -> np.ndarray:
    """With the given probability, union a synthetic glasses silhouette into
    the mask. Deterministic under rng_seed."""
    if not (0.0 <= probability <= 1.0):
        raise DataPrepError("probability must lie in [0, 1]")
    mask = imaging.validate_mask(mask)
    rng = np.random.default_rng(rng_seed) if not isinstance(rng_seed, np.random.Generator) else rng_seed
    if rng.random() >= probability:
        return mask.copy()
    h, w = mask.shape
    return np.maximum(mask, glasses_silhouette(lm, h, w))


@dataclass
class BuildStats:
    processed: int = 0
    skipped: list = field(default_factory=list)
    images: int = 0
    masks: int = 0


def _load_records(corpus_dir, landmarks_dir):
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    records = []
    if manifest.exists():
        with open(manifest) as f:
            for i, line in enumerate(f):
                line = line.strip()
                if line:
                    records.append(CorpusRecord.from_json(f"rec{i:06d}", json.loads(line),
                                                          corpus_dir, landmarks_dir))
    else:
        for i, p in enumerate(sorted(corpus_dir.glob("*.png"))):
            records.append(CorpusRecord(
                record_id=p.stem,
                image_path=str(p),
                landmarks_path=str(Path(landmarks_dir) / f"{p.stem}.json"),
            ))
    return records


def build_dataset(corpus_dir, landmarks_dir, out_dir, seed: int = 0,
                  val_fraction: float = 0.1,
                  glasses_probability: float = DEFAULT_GLASSES_PROBABILITY,
                  dilation_radius: int = DEFAULT_DILATION_RADIUS) -> dict:
    """Synthesize blank-face training images and part masks for every valid
    corpus record, write them under out_dir, and return the manifest.

    Images and masks form independent pools (paired randomly at train time).
    Deterministic for a fixed seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    records = filter_corpus(_load_records(corpus_dir, landmarks_dir))
    rng = np.random.default_rng(seed)
    stats = BuildStats()
    entries = []  # (record_id, image_rel, mask_rel)

    for rec in records:
        try:
            lm = load_landmarks(rec.landmarks_path)
        except FileNotFoundError:
            log.warning("missing landmark file for %s, skipping", rec.record_id)
            stats.skipped.append({"record": rec.record_id, "reason": "missing landmarks"})
            continue
        try:
            img = imaging.load_image_rgb(rec.image_path)
            aligned, aligned_lm, _ = imaging.align_face(img, lm, IMAGE_SIZE)
            blank = flip_stitch(crop_forehead(aligned, aligned_lm))

            mask = facial_part_mask(aligned_lm, set(MASKABLE_PARTS), dilation_radius)
            mask = augment_glasses(mask, aligned_lm, glasses_probability, rng)
            fill = mask.mean()
            if not (MASK_FILL_MIN <= fill <= MASK_FILL_MAX):
                raise DataPrepError(f"mask fill fraction {fill:.3f} outside sanity band")
        except (imaging.ImagingError, DataPrepError, LandmarkError, OSError) as e:
            log.warning("skipping %s: %s", rec.record_id, e)
            stats.skipped.append({"record": rec.record_id, "reason": str(e)})
            continue

        image_rel = f"images/{rec.record_id}.png"
        mask_rel = f"masks/{rec.record_id}.png"
        imaging.save_image_rgb(out_dir / image_rel, blank)
        imaging.save_mask_png(out_dir / mask_rel, mask)
        entries.append((rec.record_id, image_rel, mask_rel))
        stats.processed += 1

    # seeded split; image and mask pools are listed independently per split
    order = rng.permutation(len(entries))
    n_val = int(round(val_fraction * len(entries)))
    val_idx = set(order[:n_val].tolist())
    manifest = {
        "seed": seed,
        "train": {"images": [], "masks": []},
        "val": {"images": [], "masks": []},
        "skipped": stats.skipped,
    }
    for i, (rid, image_rel, mask_rel) in enumerate(entries):
        split = "val" if i in val_idx else "train"
        manifest[split]["images"].append(image_rel)
        manifest[split]["masks"].append(mask_rel)
    manifest["counts"] = {
        "train_images": len(manifest["train"]["images"]),
        "train_masks": len(manifest["train"]["masks"]),
        "val_images": len(manifest["val"]["images"]),
        "val_masks": len(manifest["val"]["masks"]),
        "skipped": len(stats.skipped),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
