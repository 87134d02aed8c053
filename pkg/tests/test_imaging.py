import numpy as np
import pytest

from faceblank import imaging
from faceblank.landmarks import canonical_landmarks, transform_landmarks


def rand_image(rng, h, w, c=3):
    shape = (h, w, c) if c == 3 else (h, w)
    return rng.random(shape).astype(np.float32)


class TestGrayscale:
    def test_white_image(self):
        img = np.ones((4, 4, 3), dtype=np.float32)
        assert np.allclose(imaging.to_grayscale(img), 1.0)

    def test_pure_red(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        img[..., 0] = 1.0
        assert np.allclose(imaging.to_grayscale(img), 0.299)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        img = rand_image(rng, 4, 4)
        expected = np.zeros((4, 4))
        for r in range(4):
            for c in range(4):
                expected[r, c] = 0.299 * img[r, c, 0] + 0.587 * img[r, c, 1] + 0.114 * img[r, c, 2]
        assert np.allclose(imaging.to_grayscale(img), expected, atol=1e-6)

    def test_bounded_by_channel_extremes(self):
        rng = np.random.default_rng(1)
        img = rand_image(rng, 8, 8)
        gray = imaging.to_grayscale(img)
        assert np.all(gray >= img.min(axis=2) - 1e-6)
        assert np.all(gray <= img.max(axis=2) + 1e-6)


class TestCanny:
    def test_constant_image_no_edges(self):
        gray = np.full((32, 32), 0.5, dtype=np.float32)
        assert imaging.canny_edges(gray).sum() == 0

    def test_vertical_step_single_thin_edge(self):
        gray = np.zeros((64, 64), dtype=np.float32)
        gray[:, 32:] = 1.0
        edges = imaging.canny_edges(gray, sigma=2.0, low_pct=0.10, high_pct=0.20)
        # away from the top/bottom rows each row crosses the contour once
        interior = edges[8:-8]
        assert np.all(interior.sum(axis=1) == 1)
        cols = np.argmax(interior, axis=1)
        assert np.all(np.abs(cols - 32) <= 2)

    def test_against_reference_implementation(self):
        # structural agreement with the scikit-image Canny on a step edge
        skimage = pytest.importorskip("skimage.feature")
        gray = np.zeros((64, 64), dtype=np.float32)
        gray[:, 32:] = 1.0
        ours = imaging.canny_edges(gray)
        ref = skimage.canny(gray, sigma=2.0, low_threshold=0.10, high_threshold=0.20,
                            use_quantiles=False)
        ours_cols = np.nonzero(ours[20])[0]
        ref_cols = np.nonzero(ref[20])[0]
        assert len(ours_cols) == len(ref_cols) == 1
        assert abs(int(ours_cols[0]) - int(ref_cols[0])) <= 1

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        gray = rand_image(rng, 32, 32, c=1)
        a = imaging.canny_edges(gray)
        b = imaging.canny_edges(gray)
        assert np.array_equal(a, b)

    def test_binary_output(self):
        rng = np.random.default_rng(3)
        edges = imaging.canny_edges(rand_image(rng, 24, 24, c=1))
        assert set(np.unique(edges)) <= {0.0, 1.0}


class TestDilate:
    def test_radius_zero_identity(self):
        rng = np.random.default_rng(4)
        mask = (rng.random((9, 9)) > 0.5).astype(np.float32)
        assert np.array_equal(imaging.dilate(mask, 0), mask)

    def test_center_pixel_disk_brute_force(self):
        mask = np.zeros((11, 11), dtype=np.float32)
        mask[5, 5] = 1.0
        out = imaging.dilate(mask, 2)
        expected = np.zeros((11, 11))
        for r in range(11):
            for c in range(11):
                if (r - 5) ** 2 + (c - 5) ** 2 <= 4:
                    expected[r, c] = 1.0
        assert np.array_equal(out, expected)
        assert out.sum() == 13

    def test_all_ones_saturates(self):
        mask = np.ones((8, 8), dtype=np.float32)
        assert np.array_equal(imaging.dilate(mask, 5), mask)

    def test_monotone_and_extensive(self):
        rng = np.random.default_rng(5)
        b = (rng.random((16, 16)) > 0.7).astype(np.float32)
        a = b.copy()
        a[rng.random((16, 16)) > 0.5] = 0.0
        da, db = imaging.dilate(a, 3), imaging.dilate(b, 3)
        assert np.all(da <= db)          # monotone
        assert np.all(a <= da)           # extensive


class TestFillPolygon:
    def test_square_brute_force(self):
        pts = [(2, 2), (7, 2), (7, 7), (2, 7)]
        mask = imaging.fill_polygon(pts, 10, 10)
        expected = np.zeros((10, 10))
        expected[2:8, 2:8] = 1.0  # boundary included
        assert np.array_equal(mask, expected)
        assert mask.sum() == 36

    def test_collinear_points_rejected(self):
        with pytest.raises(imaging.InvalidPolygonError):
            imaging.fill_polygon([(0, 0), (2, 2), (4, 4)], 10, 10)

    def test_too_few_points_rejected(self):
        with pytest.raises(imaging.InvalidPolygonError):
            imaging.fill_polygon([(0, 0), (1, 1)], 10, 10)

    def test_full_frame_rectangle(self):
        mask = imaging.fill_polygon([(0, 0), (9, 0), (9, 9), (0, 9)], 10, 10)
        assert np.array_equal(mask, np.ones((10, 10)))

    def test_nonconvex_matches_even_odd_oracle(self):
        pts = np.array([(1, 1), (12, 1), (12, 12), (7, 4), (1, 12)], dtype=float)
        mask = imaging.fill_polygon(pts, 14, 14)

        def even_odd(px, py):
            inside = False
            n = len(pts)
            for i in range(n):
                x1, y1 = pts[i]
                x2, y2 = pts[(i + 1) % n]
                if (y1 <= py) != (y2 <= py):
                    xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                    if px < xint:
                        inside = not inside
            return inside

        for r in range(14):
            for c in range(14):
                if even_odd(c, r):
                    assert mask[r, c] == 1.0, (r, c)


class TestAlignFace:
    def test_canonical_face_near_identity(self):
        lm = canonical_landmarks(256)
        rng = np.random.default_rng(6)
        img = rand_image(rng, 256, 256)
        _, _, tf = imaging.align_face(img, lm, 256)
        assert abs(tf.rotation) < 1e-6
        assert abs(tf.scale - 1.0) < 1e-6

    def test_recovers_known_rotation(self):
        lm = canonical_landmarks(256)
        theta = np.deg2rad(30.0)
        c, s = np.cos(theta), np.sin(theta)
        center = np.array([128.0, 128.0])
        rot = np.array([[c, -s], [s, c]])
        matrix = np.hstack([rot, (center - rot @ center)[:, None]])
        lm_rot = transform_landmarks(lm, matrix)
        img = np.zeros((256, 256, 3), dtype=np.float32)
        _, _, tf = imaging.align_face(img, lm_rot, 256)
        assert abs(tf.rotation + theta) < 1e-3

    def test_output_size(self):
        lm = canonical_landmarks(256)
        rng = np.random.default_rng(7)
        aligned, aligned_lm, _ = imaging.align_face(rand_image(rng, 300, 280), lm, 256)
        assert aligned.shape == (256, 256, 3)
        assert aligned_lm.shape == (106, 2)

    def test_coincident_anchors_fail(self):
        lm = np.tile([[50.0, 50.0]], (106, 1))
        img = np.zeros((100, 100, 3), dtype=np.float32)
        with pytest.raises(imaging.AlignmentError):
            imaging.align_face(img, lm, 64)

    def test_round_trip_reconstruction(self):
        # paste the aligned crop back through the inverse transform; smooth image
        ys, xs = np.mgrid[0:256, 0:256] / 255.0
        img = np.stack([ys, xs, 0.5 * (ys + xs)], axis=-1).astype(np.float32)
        lm = canonical_landmarks(256)
        theta = np.deg2rad(10.0)
        c, s = np.cos(theta), np.sin(theta)
        center = np.array([128.0, 128.0])
        rot = np.array([[c, -s], [s, c]])
        matrix = np.hstack([rot, (center - rot @ center)[:, None]])
        lm_rot = transform_landmarks(lm, matrix)
        aligned, _, tf = imaging.align_face(img, lm_rot, 256)
        back = imaging.warp_affine(aligned, tf.inverse().matrix, 256, 256)
        # compare where the crop actually covers the source
        cover = imaging.warp_affine(np.ones((256, 256), dtype=np.float32),
                                    tf.inverse().matrix, 256, 256) > 0.99
        interior = cover.copy()
        interior[:20] = interior[-20:] = False
        interior[:, :20] = interior[:, -20:] = False
        diff = np.abs(back - img).mean(axis=2)
        assert diff[interior].mean() < 0.02


class TestPoissonBlend:
    def region(self, h, w, r0, r1, c0, c1):
        m = np.zeros((h, w), dtype=np.float32)
        m[r0:r1, c0:c1] = 1.0
        return m

    def test_identity(self):
        rng = np.random.default_rng(8)
        dst = rand_image(rng, 12, 12)
        out = imaging.poisson_blend(dst, dst, self.region(12, 12, 3, 9, 3, 9))
        assert np.abs(out - dst).max() < 1e-5

    def test_constant_offset_removed(self):
        dst = np.full((12, 12, 3), 0.4, dtype=np.float32)
        src = np.clip(dst + 0.2, 0, 1)
        out = imaging.poisson_blend(src, dst, self.region(12, 12, 4, 9, 4, 9))
        assert np.abs(out - dst).max() < 1e-5

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(9)
        src = rand_image(rng, 8, 8)
        dst = rand_image(rng, 8, 8)
        region = self.region(8, 8, 2, 6, 2, 6)
        out = imaging.poisson_blend(src, dst, region)

        inside = region.astype(bool)
        ys, xs = np.nonzero(inside)
        n = len(ys)
        index = {(y, x): k for k, (y, x) in enumerate(zip(ys, xs))}
        for c in range(3):
            A = np.zeros((n, n))
            b = np.zeros(n)
            for k, (y, x) in enumerate(zip(ys, xs)):
                A[k, k] = 4.0
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    b[k] += src[y, x, c] - src[ny, nx, c]
                    if (ny, nx) in index:
                        A[k, index[(ny, nx)]] = -1.0
                    else:
                        b[k] += dst[ny, nx, c]
            sol = np.clip(np.linalg.solve(A, b), 0, 1)
            assert np.abs(out[ys, xs, c] - sol).max() < 1e-5

    def test_outside_region_untouched(self):
        rng = np.random.default_rng(10)
        src = rand_image(rng, 10, 10)
        dst = rand_image(rng, 10, 10)
        region = self.region(10, 10, 3, 7, 3, 7)
        out = imaging.poisson_blend(src, dst, region)
        outside = region == 0
        assert np.array_equal(out[outside], dst[outside])

    def test_border_region_rejected(self):
        rng = np.random.default_rng(11)
        img = rand_image(rng, 8, 8)
        region = np.zeros((8, 8), dtype=np.float32)
        region[0, 3] = 1.0
        with pytest.raises(imaging.BorderRegionError):
            imaging.poisson_blend(img, img, region)

    def test_empty_region_returns_dst(self):
        rng = np.random.default_rng(12)
        src, dst = rand_image(rng, 8, 8), rand_image(rng, 8, 8)
        out = imaging.poisson_blend(src, dst, np.zeros((8, 8), dtype=np.float32))
        assert np.array_equal(out, dst)
