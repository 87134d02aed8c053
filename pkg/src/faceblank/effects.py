"""AR effects on an erased face: cut facial-part patches from the original
photo, scale and reposition them, and merge onto the blank face with
gradient-domain (Poisson) compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .landmarks import (PART_INDICES, interocular_distance, part_polygon,
                        validate_landmarks)

EFFECT_PARTS = ("right_eyebrow", "left_eyebrow", "right_eye", "left_eye",
                "nose", "mouth")
EFFECT_NAMES = ("mono_eye", "comic", "small_face", "toonized", "eyebrowless")

# Minimum dilation applied to destination polygons so the blend boundary
# sits on skin rather than on the part outline.
REGION_PAD_PX = 2


def blend_pad(iod: float) -> int:
    """Destination-region dilation, scaled with face size. Wide enough that
    the blend boundary clears the erased hole and its feather, so boundary
    values come from untouched skin."""
    return max(REGION_PAD_PX, round(0.3 * iod))


class EffectError(ValueError):
    pass


class DegeneratePartError(EffectError):
    pass


class PlacementError(EffectError):
    pass


def polygon_centroid(points) -> np.ndarray:
    """Area-weighted (shoelace) centroid; falls back to the vertex mean for
    near-zero-area polygons."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    if abs(area) < 1e-9:
        return pts.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])


@dataclass
class PartPatch:
    """A cropped facial part: pixels, the source polygon (full-image
    coordinates), the crop origin, and the centroid anchor."""

    pixels: np.ndarray
    polygon: np.ndarray
    origin: tuple[int, int]  # (x0, y0) of the crop in the source image
    anchor: np.ndarray

    def __post_init__(self):
        x0, y0 = self.origin
        h, w = self.pixels.shape[:2]
        if (self.polygon[:, 0].min() < x0 or self.polygon[:, 0].max() > x0 + w
                or self.polygon[:, 1].min() < y0 or self.polygon[:, 1].max() > y0 + h):
            raise EffectError("part polygon extends outside its crop")


def _crop_patch(img: np.ndarray, polygon: np.ndarray, pad: int) -> PartPatch:
    h, w = img.shape[:2]
    poly = np.asarray(polygon, dtype=np.float64)
    span = poly.max(axis=0) - poly.min(axis=0)
    if span.min() < 1.0:
        raise DegeneratePartError("polygon spans less than one pixel")
    x0 = max(int(np.floor(poly[:, 0].min())) - pad, 0)
    y0 = max(int(np.floor(poly[:, 1].min())) - pad, 0)
    x1 = min(int(np.ceil(poly[:, 0].max())) + pad + 1, w)
    y1 = min(int(np.ceil(poly[:, 1].max())) + pad + 1, h)
    return PartPatch(pixels=img[y0:y1, x0:x1].copy(), polygon=poly,
                     origin=(x0, y0), anchor=polygon_centroid(poly))


def extract_parts(img, lm, pad: int | None = None) -> dict:
    """Patches for both eyebrows, both eyes, nose and mouth, cropped from
    padded part bounding boxes with centroid anchors."""
    img = imaging.validate_image(img)
    lm = validate_landmarks(lm)
    if pad is None:
        # generous margin: the blend boundary ring must sample real patch
        # pixels even after the patch is shrunk toward its anchor
        pad = max(6, round(0.5 * interocular_distance(lm)))
    return {part: _crop_patch(img, part_polygon(lm, part), pad)
            for part in EFFECT_PARTS}


def extract_face_patch(img, lm, pad: int | None = None) -> PartPatch:
    """Whole-face patch from the contour polygon (used by small_face)."""
    img = imaging.validate_image(img)
    lm = validate_landmarks(lm)
    if pad is None:
        pad = max(6, round(0.5 * interocular_distance(lm)))
    return _crop_patch(img, part_polygon(lm, "contour"), pad)


@dataclass
class EffectSpec:
    """One effect recipe: which patches to paste, per-part scale factors,
    and per-part offsets in units of inter-ocular distance.

    `anchors` maps a part to where its destination anchor sits: "self"
    (the patch's own centroid) or "nose_top" (topmost nose landmark).
    """

    name: str
    parts: tuple = EFFECT_PARTS
    scales: dict = field(default_factory=dict)
    offsets: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in EFFECT_NAMES:
            raise EffectError(f"unknown effect {self.name!r}")
        for part, s in self.scales.items():
            if s <= 0:
                raise EffectError(f"scale for {part!r} must be > 0, got {s}")
        self.parts = tuple(self.parts)

    @classmethod
    def from_dict(cls, d: dict) -> "EffectSpec":
        spec = cls(name=d["name"])
        if "parts" in d:
            spec.parts = tuple(d["parts"])
        spec.scales = {k: float(v) for k, v in d.get("scales", {}).items()}
        spec.offsets = {k: tuple(v) for k, v in d.get("offsets", {}).items()}
        spec.anchors = dict(d.get("anchors", {}))
        spec.__post_init__()
        return spec


def default_spec(name: str) -> EffectSpec:
    """The five documented recipes with default factors."""
    if name == "eyebrowless":
        return EffectSpec(name, parts=("right_eye", "left_eye", "nose", "mouth"))
    if name == "comic":
        return EffectSpec(name, parts=EFFECT_PARTS,
                          scales={"mouth": 1.5, "right_eye": 0.7, "left_eye": 0.7})
    if name == "toonized":
        return EffectSpec(name, parts=EFFECT_PARTS,
                          scales={"right_eye": 1.3, "left_eye": 1.3,
                                  "mouth": 1.3, "nose": 0.75})
    if name == "mono_eye":
        return EffectSpec(name, parts=("right_eye", "nose", "mouth"),
                          anchors={"right_eye": "nose_top"},
                          offsets={"right_eye": (0.0, -0.25)})
    if name == "small_face":
        return EffectSpec(name, parts=("face",), scales={"face": 0.8})
    raise EffectError(f"unknown effect {name!r}")


def _nose_top(lm: np.ndarray) -> np.ndarray:
    nose = lm[PART_INDICES["nose"]]
    return nose[np.argmin(nose[:, 1])]


def apply_effect(blank, parts: dict, lm, spec: EffectSpec) -> np.ndarray:
    """Paste each selected patch, scaled about its anchor and shifted by the
    spec offset, onto the blank face via Poisson blending. Pixels outside
    the padded destination regions are untouched."""
    out = imaging.validate_image(blank).copy()
    lm = validate_landmarks(lm)
    h, w = out.shape[:2]
    iod = interocular_distance(lm)

    for part in spec.parts:
        if part not in parts:
            raise EffectError(f"effect {spec.name!r} needs a patch for {part!r}")
        patch = parts[part]
        s = float(spec.scales.get(part, 1.0))
        dx, dy = spec.offsets.get(part, (0.0, 0.0))
        mode = spec.anchors.get(part, "self")
        if mode == "self":
            base = patch.anchor
        elif mode == "nose_top":
            base = _nose_top(lm)
        else:
            raise EffectError(f"unknown anchor mode {mode!r}")
        dest = base + np.array([dx, dy]) * iod

        # source -> frame affine: scale about the patch anchor, then move the
        # anchor to its destination
        t = dest - s * patch.anchor
        matrix = np.array([[s, 0.0, t[0]], [0.0, s, t[1]]])

        dst_poly = patch.polygon * s + t
        region = imaging.dilate(
            imaging.fill_polygon(dst_poly, h, w), blend_pad(iod))
        if (region[0, :].any() or region[-1, :].any()
                or region[:, 0].any() or region[:, -1].any()
                or dst_poly.min() < 0 or dst_poly[:, 0].max() >= w
                or dst_poly[:, 1].max() >= h):
            raise PlacementError(
                f"{spec.name!r} places {part!r} outside the frame")

        x0, y0 = patch.origin
        canvas = np.zeros((h, w, 3), dtype=np.float32)
        ph, pw = patch.pixels.shape[:2]
        canvas[y0:y0 + ph, x0:x0 + pw] = patch.pixels
        warped = imaging.warp_affine(canvas, matrix, h, w)
        out = imaging.poisson_blend(warped, out, region)
    return out
