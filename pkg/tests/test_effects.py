import numpy as np
import pytest

from faceblank import effects, imaging
from faceblank.landmarks import PART_INDICES, canonical_landmarks, interocular_distance
from faceblank.synthetic import synthetic_face


@pytest.fixture(scope="module")
def face():
    return synthetic_face(seed=5, size=128)


class TestCentroid:
    def test_square(self):
        square = [(2, 2), (6, 2), (6, 6), (2, 6)]
        assert np.allclose(effects.polygon_centroid(square), [4.0, 4.0])

    def test_regular_polygon_centroid_is_its_center(self):
        a = np.linspace(0, 2 * np.pi, 9, endpoint=False)
        poly = np.stack([5 + 2 * np.cos(a), 7 + 2 * np.sin(a)], axis=1)
        assert np.allclose(effects.polygon_centroid(poly), [5.0, 7.0])

    def test_vertex_averaging_would_be_wrong(self):
        # centroid is area-weighted: doubling a vertex must not move it
        square = np.array([(0, 0), (4, 0), (4, 4), (4, 4), (0, 4)], dtype=float)
        assert np.allclose(effects.polygon_centroid(square), [2.0, 2.0])

    def test_degenerate_falls_back_to_vertex_mean(self):
        line = np.array([(0, 0), (2, 0), (4, 0)], dtype=float)
        assert np.allclose(effects.polygon_centroid(line), [2.0, 0.0])


class TestExtractParts:
    def test_six_parts(self, face):
        img, lm = face
        parts = effects.extract_parts(img, lm)
        assert sorted(parts) == sorted(effects.EFFECT_PARTS)

    def test_polygon_inside_crop(self, face):
        img, lm = face
        for part, patch in effects.extract_parts(img, lm).items():
            x0, y0 = patch.origin
            h, w = patch.pixels.shape[:2]
            assert patch.polygon[:, 0].min() >= x0
            assert patch.polygon[:, 1].min() >= y0
            assert patch.polygon[:, 0].max() <= x0 + w
            assert patch.polygon[:, 1].max() <= y0 + h

    def test_pixels_match_source(self, face):
        img, lm = face
        patch = effects.extract_parts(img, lm)["mouth"]
        x0, y0 = patch.origin
        h, w = patch.pixels.shape[:2]
        assert np.array_equal(patch.pixels, img[y0:y0 + h, x0:x0 + w])

    def test_anchor_is_polygon_centroid(self, face):
        img, lm = face
        for patch in effects.extract_parts(img, lm).values():
            assert np.allclose(patch.anchor, effects.polygon_centroid(patch.polygon))

    def test_degenerate_part_rejected(self, face):
        img, lm = face
        lm = lm.copy()
        lm[PART_INDICES["mouth"]] = lm[PART_INDICES["mouth"]][0]
        with pytest.raises(effects.DegeneratePartError):
            effects.extract_parts(img, lm)

    def test_face_patch_uses_contour(self, face):
        img, lm = face
        patch = effects.extract_face_patch(img, lm)
        assert np.array_equal(patch.polygon, lm[PART_INDICES["contour"]])


class TestEffectSpec:
    def test_unknown_name_rejected(self):
        with pytest.raises(effects.EffectError, match="unknown effect"):
            effects.EffectSpec("sparkle")

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(effects.EffectError, match="scale"):
            effects.EffectSpec("comic", scales={"mouth": 0.0})

    def test_from_dict_roundtrip(self):
        spec = effects.EffectSpec.from_dict({
            "name": "comic", "parts": ["mouth"], "scales": {"mouth": 2},
            "offsets": {"mouth": [0.1, -0.2]},
        })
        assert spec.parts == ("mouth",)
        assert spec.scales == {"mouth": 2.0}
        assert spec.offsets == {"mouth": (0.1, -0.2)}

    def test_five_default_recipes(self):
        for name in effects.EFFECT_NAMES:
            assert effects.default_spec(name).name == name
        brows = effects.default_spec("eyebrowless").parts
        assert "right_eyebrow" not in brows and "left_eyebrow" not in brows
        assert set(brows) == {"right_eye", "left_eye", "nose", "mouth"}
        comic = effects.default_spec("comic")
        assert comic.scales["mouth"] > 1.0 > comic.scales["right_eye"]
        toon = effects.default_spec("toonized")
        assert toon.scales["right_eye"] > 1.0 > toon.scales["nose"]
        assert effects.default_spec("small_face").scales["face"] < 1.0


@pytest.fixture(scope="module")
def parts(face):
    img, lm = face
    parts = effects.extract_parts(img, lm)
    parts["face"] = effects.extract_face_patch(img, lm)
    return parts


class TestApplyEffect:
    def test_all_five_effects_run(self, face, parts):
        img, lm = face
        for name in effects.EFFECT_NAMES:
            out = effects.apply_effect(img, parts, lm, effects.default_spec(name))
            assert out.shape == img.shape and np.isfinite(out).all()

    def test_identity_paste_onto_original_is_near_noop(self, face, parts):
        # pasting an unscaled patch back where it came from reproduces the
        # source through the gradient-domain solve
        img, lm = face
        spec = effects.EffectSpec("eyebrowless", parts=("mouth", "nose"))
        out = effects.apply_effect(img, parts, lm, spec)
        assert np.abs(out - img).mean() < 1e-3

    def test_changes_confined_to_destination_regions(self, face, parts):
        img, lm = face
        spec = effects.default_spec("comic")
        out = effects.apply_effect(img, parts, lm, spec)
        h, w = img.shape[:2]
        allowed = np.zeros((h, w), dtype=np.float32)
        for part in spec.parts:
            patch = parts[part]
            s = spec.scales.get(part, 1.0)
            t = patch.anchor - s * patch.anchor
            region = imaging.fill_polygon(patch.polygon * s + t, h, w)
            pad = effects.blend_pad(interocular_distance(lm))
            allowed = np.maximum(allowed, imaging.dilate(region, pad))
        changed = np.any(out != img, axis=2)
        assert not (changed & (allowed == 0)).any()

    def test_mono_eye_sits_above_the_nose(self, face, parts):
        img, lm = face
        spec = effects.default_spec("mono_eye")
        out = effects.apply_effect(img, parts, lm, spec)
        changed = np.any(out != img, axis=2)
        nose = lm[PART_INDICES["nose"]]
        top_y = nose[:, 1].min()
        above = changed[: int(top_y)]
        assert above.any()
        xs = np.nonzero(above.any(axis=0))[0]
        nose_x = nose[np.argmin(nose[:, 1]), 0]
        iod = interocular_distance(lm)
        assert abs(xs.mean() - nose_x) < 0.2 * iod

    def test_scaled_mouth_region_grows(self, face, parts):
        img, lm = face
        big = effects.apply_effect(img, parts, lm,
                                   effects.EffectSpec("comic", parts=("mouth",),
                                                      scales={"mouth": 1.5}))
        small = effects.apply_effect(img, parts, lm,
                                     effects.EffectSpec("comic", parts=("mouth",),
                                                        scales={"mouth": 0.7}))
        # compare against a flat canvas so the changed region is the region
        flat = np.full_like(img, 0.5)
        grown = np.any(effects.apply_effect(flat, parts, lm,
                                            effects.EffectSpec("comic", parts=("mouth",),
                                                               scales={"mouth": 1.5})) != flat, axis=2)
        shrunk = np.any(effects.apply_effect(flat, parts, lm,
                                             effects.EffectSpec("comic", parts=("mouth",),
                                                                scales={"mouth": 0.7})) != flat, axis=2)
        assert grown.sum() > shrunk.sum()
        assert np.isfinite(big).all() and np.isfinite(small).all()

    def test_offscreen_placement_rejected(self, face, parts):
        img, lm = face
        spec = effects.EffectSpec("comic", parts=("mouth",),
                                  offsets={"mouth": (0.0, 5.0)})
        with pytest.raises(effects.PlacementError):
            effects.apply_effect(img, parts, lm, spec)

    def test_missing_patch_rejected(self, face):
        img, lm = face
        with pytest.raises(effects.EffectError, match="needs a patch"):
            effects.apply_effect(img, {}, lm, effects.default_spec("comic"))

    def test_canonical_landmarks_all_effects(self):
        lm = canonical_landmarks(128)
        rng = np.random.default_rng(2)
        img = rng.random((128, 128, 3), dtype=np.float32)
        parts = effects.extract_parts(img, lm)
        parts["face"] = effects.extract_face_patch(img, lm)
        for name in effects.EFFECT_NAMES:
            effects.apply_effect(img, parts, lm, effects.default_spec(name))
