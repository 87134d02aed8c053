"""106-point facial landmark layout and helpers.

The 106-point scheme used throughout this package follows one fixed index
table (the ordering of points inside each range is clockwise starting from
the leftmost point):

    =================  ===========  ======
    part               indices      count
    =================  ===========  ======
    face contour       0 .. 32      33
    right eyebrow      33 .. 41     9
    left eyebrow       42 .. 50     9
    nose               51 .. 65     15
    right eye          66 .. 74     9
    left eye           75 .. 83     9
    mouth (outer)      84 .. 103    20
    pupils (R, L)      104, 105     2
    =================  ===========  ======

"right"/"left" are in image coordinates (right eye appears on the left side
of an upright portrait).
"""

from __future__ import annotations

import json

import numpy as np

N_LANDMARKS = 106

PART_INDICES = {
    "contour": list(range(0, 33)),
    "right_eyebrow": list(range(33, 42)),
    "left_eyebrow": list(range(42, 51)),
    "nose": list(range(51, 66)),
    "right_eye": list(range(66, 75)),
    "left_eye": list(range(75, 84)),
    "mouth": list(range(84, 104)),
    "pupils": [104, 105],
}

# Part names accepted by mask generation; each maps to one or more polygons.
MASKABLE_PARTS = {
    "eyebrows": ("right_eyebrow", "left_eyebrow"),
    "eyes": ("right_eye", "left_eye"),
    "nose": ("nose",),
    "mouth": ("mouth",),
}


class LandmarkError(ValueError):
    pass


def validate_landmarks(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise LandmarkError(
            f"expected {N_LANDMARKS} (x, y) pairs, got array of shape {pts.shape}"
        )
    return pts


def part_polygon(lm: np.ndarray, part: str) -> np.ndarray:
    """Ordered polygon vertices for one named sub-part."""
    lm = validate_landmarks(lm)
    if part not in PART_INDICES:
        raise LandmarkError(f"unknown landmark part {part!r}")
    return lm[PART_INDICES[part]]


def eye_centers(lm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(right_eye_center, left_eye_center) as (x, y) arrays."""
    lm = validate_landmarks(lm)
    return (
        lm[PART_INDICES["right_eye"]].mean(axis=0),
        lm[PART_INDICES["left_eye"]].mean(axis=0),
    )


def mouth_center(lm: np.ndarray) -> np.ndarray:
    lm = validate_landmarks(lm)
    return lm[PART_INDICES["mouth"]].mean(axis=0)


def interocular_distance(lm: np.ndarray) -> float:
    r, l = eye_centers(lm)
    return float(np.linalg.norm(l - r))


def eyebrow_top_row(lm: np.ndarray) -> float:
    """Smallest y over both eyebrow polygons."""
    lm = validate_landmarks(lm)
    rows = PART_INDICES["right_eyebrow"] + PART_INDICES["left_eyebrow"]
    return float(lm[rows, 1].min())


def load_landmarks(path) -> np.ndarray:
    """Landmark file: JSON array of 106 [x, y] pairs."""
    with open(path) as f:
        data = json.load(f)
    return validate_landmarks(data)


def save_landmarks(path, lm: np.ndarray) -> None:
    lm = validate_landmarks(lm)
    with open(path, "w") as f:
        json.dump([[float(x), float(y)] for x, y in lm], f)


def transform_landmarks(lm: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a 2x3 affine matrix to all points."""
    lm = validate_landmarks(lm)
    homo = np.concatenate([lm, np.ones((N_LANDMARKS, 1))], axis=1)
    return homo @ np.asarray(matrix, dtype=np.float64).T


def canonical_landmarks(size: int = 256) -> np.ndarray:
    """A synthetic frontal 106-point layout inside a size x size frame.

    Used for tests, self-checks and synthetic data generation; the layout is
    a plausible upright face with eyes at 38% height and mouth at 72%.
    """
    s = float(size)
    pts = np.zeros((N_LANDMARKS, 2), dtype=np.float64)

    # face contour: half ellipse from left temple, around the chin, to right temple
    t = np.linspace(0.0, np.pi, 33)
    pts[0:33, 0] = s * (0.5 - 0.38 * np.cos(t))
    pts[0:33, 1] = s * (0.40 + 0.46 * np.sin(t))

    def ellipse(idx, cx, cy, rx, ry):
        a = np.linspace(0.0, 2.0 * np.pi, len(idx), endpoint=False)
        pts[idx, 0] = s * (cx + rx * np.cos(a))
        pts[idx, 1] = s * (cy + ry * np.sin(a))

    ellipse(PART_INDICES["right_eyebrow"], 0.34, 0.305, 0.085, 0.018)
    ellipse(PART_INDICES["left_eyebrow"], 0.66, 0.305, 0.085, 0.018)
    ellipse(PART_INDICES["right_eye"], 0.34, 0.38, 0.065, 0.030)
    ellipse(PART_INDICES["left_eye"], 0.66, 0.38, 0.065, 0.030)
    ellipse(PART_INDICES["mouth"], 0.50, 0.72, 0.115, 0.050)

    # nose: bridge line down the center then a triangle of nostril points
    nose = PART_INDICES["nose"]
    bridge = nose[:5]
    pts[bridge, 0] = s * 0.5
    pts[bridge, 1] = s * np.linspace(0.40, 0.56, len(bridge))
    base = nose[5:]
    a = np.linspace(0.0, 2.0 * np.pi, len(base), endpoint=False)
    pts[base, 0] = s * (0.5 + 0.055 * np.cos(a))
    pts[base, 1] = s * (0.575 + 0.030 * np.sin(a))

    pts[104] = [s * 0.34, s * 0.38]
    pts[105] = [s * 0.66, s * 0.38]
    return pts
