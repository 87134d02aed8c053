"""Foundation image operators: grayscale, Canny, morphology, polygon
rasterization, similarity-transform alignment and Poisson blending.

All images are numpy arrays with unit-interval float32 intensities:
RGB images are H x W x 3, grayscale images and edge maps H x W, binary
masks H x W with values in {0, 1} (stored as float32 or uint8).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse
from scipy.sparse.linalg import cg
from PIL import Image

from .landmarks import eye_centers, mouth_center, validate_landmarks, transform_landmarks

# Canny defaults (fractions of the maximum gradient magnitude)
CANNY_SIGMA = 2.0
CANNY_LOW = 0.10
CANNY_HIGH = 0.20


class ImagingError(ValueError):
    pass


class InvalidPolygonError(ImagingError):
    pass


class AlignmentError(ImagingError):
    pass


class BorderRegionError(ImagingError):
    pass


def validate_image(img, channels=3) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    expected_ndim = 3 if channels == 3 else 2
    if img.ndim != expected_ndim or (channels == 3 and img.shape[2] != 3):
        raise ImagingError(f"expected H x W{' x 3' if channels == 3 else ''} image, got shape {img.shape}")
    if img.size == 0:
        raise ImagingError("empty image")
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise ImagingError("image intensities must lie in [0, 1]")
    return np.clip(img, 0.0, 1.0)


def validate_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ImagingError(f"expected H x W mask, got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ImagingError("mask must be strictly binary")
    return mask.astype(np.float32)


def to_grayscale(img) -> np.ndarray:
    """Luminance combination 0.299 R + 0.587 G + 0.114 B."""
    img = validate_image(img)
    return (0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]).astype(np.float32)


def canny_edges(gray, sigma=CANNY_SIGMA, low_pct=CANNY_LOW, high_pct=CANNY_HIGH) -> np.ndarray:
    """Binary edge map: Gaussian smoothing, Sobel gradients, non-maximum
    suppression along the quantized gradient direction, then hysteresis.

    Thresholds are fractions of the maximum gradient magnitude.
    """
    gray = validate_image(gray, channels=1)
    if sigma <= 0:
        raise ImagingError("sigma must be positive")
    if not (0 < low_pct < high_pct <= 1):
        raise ImagingError("need 0 < low_pct < high_pct <= 1")

    smoothed = ndi.gaussian_filter(gray.astype(np.float64), sigma, mode="nearest")
    gx = ndi.sobel(smoothed, axis=1, mode="nearest")
    gy = ndi.sobel(smoothed, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros_like(gray, dtype=np.float32)

    # quantize gradient direction into 4 bins and compare against the two
    # neighbors along that direction; ties broken asymmetrically so a flat
    # two-pixel ridge keeps exactly one pixel
    angle = np.mod(np.rad2deg(np.arctan2(gy, gx)), 180.0)
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape

    def shifted(dy, dx):
        return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1), (0, -1)),   # horizontal gradient
        ((angle >= 22.5) & (angle < 67.5), (1, 1), (-1, -1)),   # diagonal /
        ((angle >= 67.5) & (angle < 112.5), (1, 0), (-1, 0)),   # vertical gradient
        ((angle >= 112.5) & (angle < 157.5), (1, -1), (-1, 1)),  # diagonal \
    ]
    keep = np.zeros_like(mag, dtype=bool)
    for sel, fwd, bwd in bins:
        keep |= sel & (mag >= shifted(*fwd)) & (mag > shifted(*bwd))
    thinned = np.where(keep, mag, 0.0)

    high = thinned >= high_pct * peak
    low = thinned >= low_pct * peak
    labels, n = ndi.label(low, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(gray, dtype=np.float32)
    strong = np.zeros(n + 1, dtype=bool)
    strong[np.unique(labels[high])] = True
    strong[0] = False
    return strong[labels].astype(np.float32)


def disk_element(radius: int) -> np.ndarray:
    """Disk structuring element: pixels within Euclidean `radius` of center."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def dilate(mask, radius: int) -> np.ndarray:
    """Morphological dilation with a disk structuring element."""
    mask = validate_mask(mask)
    if radius < 0:
        raise ImagingError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    out = ndi.binary_dilation(mask.astype(bool), structure=disk_element(radius))
    return out.astype(np.float32)


def fill_polygon(points, height: int, width: int) -> np.ndarray:
    """Rasterize a (possibly non-convex) polygon with the even-odd rule;
    pixels on the boundary segments are included."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise InvalidPolygonError("polygon needs at least 3 (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    area2 = np.abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))
    if area2 < 1e-9:
        raise InvalidPolygonError("degenerate polygon with zero area")

    # even-odd crossing count at every pixel center, vectorized over edges
    px = np.arange(width, dtype=np.float64)[None, :]
    py = np.arange(height, dtype=np.float64)[:, None]
    inside = np.zeros((height, width), dtype=bool)
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        crosses = (y1 <= py) != (y2 <= py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < xint)

    # boundary: rasterize each segment densely
    mask = inside
    for i in range(n):
        p1, p2 = pts[i], pts[(i + 1) % n]
        steps = int(np.ceil(np.abs(p2 - p1).max())) * 2 + 1
        line = p1[None, :] + np.linspace(0, 1, steps)[:, None] * (p2 - p1)[None, :]
        cols = np.clip(np.round(line[:, 0]).astype(int), 0, width - 1)
        rows = np.clip(np.round(line[:, 1]).astype(int), 0, height - 1)
        keepc = (line[:, 0] > -0.5) & (line[:, 0] < width - 0.5)
        keepr = (line[:, 1] > -0.5) & (line[:, 1] < height - 0.5)
        mask[rows[keepc & keepr], cols[keepc & keepr]] = True
    return mask.astype(np.float32)


@dataclass
class SimilarityTransform:
    """2x3 affine matrix mapping source pixel coords to aligned coords."""

    matrix: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "SimilarityTransform":
        full = np.vstack([self.matrix, [0.0, 0.0, 1.0]])
        return SimilarityTransform(np.linalg.inv(full)[:2])

    @property
    def scale(self) -> float:
        return float(np.sqrt(np.abs(np.linalg.det(self.matrix[:, :2]))))

    @property
    def rotation(self) -> float:
        return float(np.arctan2(self.matrix[1, 0], self.matrix[0, 0]))


def _umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity (rotation + uniform scale + translation)."""
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    var = (src_c ** 2).sum() / len(src)
    if var < 1e-12:
        raise AlignmentError("anchor points are coincident")
    cov = dst_c.T @ src_c / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    diag = np.diag([1.0, d])
    rot = u @ diag @ vt
    scale = np.trace(np.diag(s) @ diag) / var
    if not np.isfinite(scale) or scale < 1e-12:
        raise AlignmentError("near-singular similarity transform")
    t = dst_mean - scale * rot @ src_mean
    return np.hstack([scale * rot, t[:, None]])


def warp_affine(img, matrix: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear warp of img through a 2x3 source->dest matrix; samples beyond
    the border clamp to the edge."""
    inv = SimilarityTransform(np.asarray(matrix, dtype=np.float64)).inverse().matrix
    ys, xs = np.mgrid[0:out_height, 0:out_width]
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    coords = np.stack([src_y.ravel(), src_x.ravel()])
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        out = ndi.map_coordinates(img, coords, order=1, mode="nearest")
        return out.reshape(out_height, out_width).astype(np.float32)
    chans = [
        ndi.map_coordinates(img[..., c], coords, order=1, mode="nearest").reshape(out_height, out_width)
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(np.float32)


def align_face(img, lm, out_size: int = 256):
    """Similarity-align a face so the eye centers and mouth center land on
    canonical positions of an out_size x out_size crop.

    Returns (aligned_image, aligned_landmarks, transform); the transform maps
    source pixels to crop pixels and is invertible for pasting results back.
    """
    img = validate_image(img)
    lm = validate_landmarks(lm)
    r_eye, l_eye = eye_centers(lm)
    mouth = mouth_center(lm)
    src = np.stack([r_eye, l_eye, mouth])
    s = float(out_size)
    dst = np.array([[0.34 * s, 0.38 * s], [0.66 * s, 0.38 * s], [0.50 * s, 0.72 * s]])
    matrix = _umeyama_similarity(src, dst)
    aligned = warp_affine(img, matrix, out_size, out_size)
    aligned_lm = transform_landmarks(lm, matrix)
    return aligned, aligned_lm, SimilarityTransform(matrix)


def poisson_blend(src, dst, region, tol=1e-6, maxiter=10000) -> np.ndarray:
    """Gradient-domain compositing: inside `region` solve the discrete
    Poisson equation with src gradients and dst boundary values; outside the
    region the output equals dst exactly.
    """
    src = validate_image(src)
    dst = validate_image(dst)
    region = validate_mask(region)
    if src.shape != dst.shape or region.shape != dst.shape[:2]:
        raise ImagingError("src, dst and region must share spatial size")
    inside = region.astype(bool)
    if not inside.any():
        return dst.copy()
    if inside[0, :].any() or inside[-1, :].any() or inside[:, 0].any() or inside[:, -1].any():
        raise BorderRegionError("blend region must not touch the image border")

    h, w = inside.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(inside)
    n = len(ys)
    idx[ys, xs] = np.arange(n)

    offsets = ((-1, 0), (1, 0), (0, -1), (0, 1))
    rows, cols, vals = [], [], []
    boundary = np.zeros((n, 3), dtype=np.float64)
    lap_src = np.zeros((n, 3), dtype=np.float64)
    srcf = src.astype(np.float64)
    dstf = dst.astype(np.float64)
    for k in range(n):
        y, x = ys[k], xs[k]
        rows.append(k)
        cols.append(k)
        vals.append(4.0)
        for dy, dx in offsets:
            ny, nx = y + dy, x + dx
            lap_src[k] += srcf[y, x] - srcf[ny, nx]
            if inside[ny, nx]:
                rows.append(k)
                cols.append(idx[ny, nx])
                vals.append(-1.0)
            else:
                boundary[k] += dstf[ny, nx]

    mat = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    out = dstf.copy()
    for c in range(3):
        rhs = lap_src[:, c] + boundary[:, c]
        sol, info = cg(mat, rhs, rtol=tol, maxiter=maxiter)
        if info != 0:
            raise ImagingError(f"Poisson solve did not converge (info={info})")
        out[ys, xs, c] = sol
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG / file I/O

def load_image_rgb(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image_rgb(path, img) -> None:
    img = validate_image(img)
    Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return (arr >= 128).astype(np.float32)


def save_mask_png(path, mask) -> None:
    mask = validate_mask(mask)
    Image.fromarray((mask * 255.0).astype(np.uint8)).save(path)


def save_gray_png(path, gray) -> None:
    gray = validate_image(gray, channels=1)
    Image.fromarray((gray * 255.0 + 0.5).astype(np.uint8)).save(path)
