"""End-to-end face erasing on real photographs: align, mask, run the three
generators, composite the blank face back into the original frame."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch

from . import checkpoint, imaging, models, trainer
from .dataprep import facial_part_mask
from .landmarks import validate_landmarks

log = logging.getLogger(__name__)

FEATHER_PX = 3


class PipelineError(RuntimeError):
    pass


class ErasePipeline:
    """Stateless inference wrapper around a trained checkpoint; safe to
    share across concurrent per-image calls."""

    def __init__(self, nets: dict, image_size: int = 256,
                 dilation_radius: int | None = None,
                 canny_sigma: float = imaging.CANNY_SIGMA,
                 canny_low: float = imaging.CANNY_LOW,
                 canny_high: float = imaging.CANNY_HIGH):
        for name in ("edge_generator", "pixel_clone_generator", "refine_net"):
            if name not in nets:
                raise PipelineError(f"missing network {name!r}")
        self.nets = {k: v.eval() for k, v in nets.items()}
        self.image_size = image_size
        if dilation_radius is None:
            # same 5%-of-crop margin the dataset builder uses at 256
            dilation_radius = max(1, round(0.05 * image_size))
        self.dilation_radius = dilation_radius
        self.canny = (canny_sigma, canny_low, canny_high)

    @classmethod
    def from_checkpoint(cls, ckpt_dir) -> "ErasePipeline":
        ckpt_dir = Path(ckpt_dir)
        with open(ckpt_dir / "manifest.json") as f:
            manifest = json.load(f)
        spec = models.GeneratorSpec.from_dict(manifest["generator_spec"])
        nets = {
            "edge_generator": models.EdgeGenerator(spec),
            "pixel_clone_generator": models.PixelCloneGenerator(spec),
            "refine_net": models.RefineNet(spec),
        }
        checkpoint.load_checkpoint(ckpt_dir, nets)
        cfg = manifest.get("config", {})
        return cls(nets, image_size=cfg.get("image_size", 256),
                   canny_sigma=cfg.get("canny_sigma", imaging.CANNY_SIGMA),
                   canny_low=cfg.get("canny_low", imaging.CANNY_LOW),
                   canny_high=cfg.get("canny_high", imaging.CANNY_HIGH))

    def erase_aligned(self, aligned: np.ndarray, mask: np.ndarray) -> dict:
        """Run the generator stack on an already-aligned crop."""
        gray = imaging.to_grayscale(aligned)
        edges = imaging.canny_edges(gray, *self.canny)
        keep = 1.0 - mask

        def t(a, channels_last=False):
            x = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))
            return (x.permute(2, 0, 1) if channels_last else x.unsqueeze(0)).unsqueeze(0)

        out = trainer.run_inference(
            self.nets,
            t(aligned * keep[..., None], channels_last=True),
            t(gray * keep), t(edges * keep), t(mask),
        )
        return {
            "aligned_blank": out["output"][0].permute(1, 2, 0).numpy(),
            "edge_completed": out["edge_hat"][0, 0].numpy(),
            "flow": out["flow"][0].permute(1, 2, 0).numpy(),
            "coarse": out["coarse"][0].permute(1, 2, 0).numpy(),
        }

    def erase(self, img, lm, parts=("eyebrows", "eyes", "nose", "mouth")) -> dict:
        """Erase the requested facial parts and paste the blank face back
        into the full frame with a feathered seam. Returns all
        intermediates."""
        img = imaging.validate_image(img)
        lm = validate_landmarks(lm)
        parts = set(parts)
        size = self.image_size
        if not parts:
            zero = np.zeros((size, size), dtype=np.float32)
            return {"blank_full_frame": img.copy(),
                    "aligned_blank": np.zeros((size, size, 3), dtype=np.float32),
                    "mask": zero, "edge_completed": zero,
                    "flow": np.zeros((size, size, 2), dtype=np.float32),
                    "coarse": np.zeros((size, size, 3), dtype=np.float32)}

        aligned, aligned_lm, tf = imaging.align_face(img, lm, size)
        mask = facial_part_mask(aligned_lm, parts, self.dilation_radius, size, size)
        result = self.erase_aligned(aligned, mask)
        full = paste_back(img, result["aligned_blank"], mask, tf)
        return {"blank_full_frame": full, "mask": mask, **result}


def paste_back(frame: np.ndarray, aligned_out: np.ndarray, hole_mask: np.ndarray,
               tf: imaging.SimilarityTransform, feather_px: int = FEATHER_PX) -> np.ndarray:
    """Warp the synthesized crop back into the frame and blend only the hole
    pixels, with an alpha ramp of feather_px outside the hole boundary.
    Pixels away from the hole and seam stay bit-identical to the frame."""
    h, w = frame.shape[:2]
    inv = tf.inverse().matrix
    pasted = imaging.warp_affine(aligned_out, inv, h, w)
    warped_hole = imaging.warp_affine(hole_mask, inv, h, w)
    hard = warped_hole > 0.5
    if not hard.any():
        return frame.copy()
    dist = ndi.distance_transform_edt(~hard)
    alpha = np.clip(1.0 - dist / max(feather_px, 1), 0.0, 1.0).astype(np.float32)
    alpha[hard] = 1.0
    out = frame * (1.0 - alpha[..., None]) + pasted * alpha[..., None]
    exact = alpha == 0.0
    out[exact] = frame[exact]
    return out.astype(np.float32)


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Optical-flow color wheel: hue encodes direction, saturation encodes
    magnitude; zero flow renders white."""
    fx, fy = flow[..., 0], flow[..., 1]
    mag = np.sqrt(fx * fx + fy * fy)
    peak = mag.max()
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-fy, -fx) / np.pi + 1.0) / 2.0  # [0, 1)
    # HSV -> RGB with V = 1
    i = np.floor(hue * 6.0).astype(int) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    lut = [(one, t, p), (q, one, p), (p, one, t), (p, q, one), (t, p, one), (one, p, q)]
    rgb = np.zeros(flow.shape[:2] + (3,), dtype=np.float32)
    for k, (r, g, b) in enumerate(lut):
        sel = i == k
        rgb[sel, 0], rgb[sel, 1], rgb[sel, 2] = r[sel], g[sel], b[sel]
    return np.clip(rgb, 0.0, 1.0)


def intermediate_grid(img, result: dict) -> np.ndarray:
    """Side-by-side panel: input, completed edges, flow, coarse, final."""
    size = result["coarse"].shape[0]
    panels = []
    def resize(x):
        if x.shape[:2] == (size, size):
            return x
        sy, sx = size / x.shape[0], size / x.shape[1]
        return imaging.warp_affine(x, np.array([[sx, 0, 0], [0, sy, 0]]), size, size)
    panels.append(resize(img))
    panels.append(np.repeat(result["edge_completed"][..., None], 3, axis=2))
    panels.append(flow_to_color(result["flow"]))
    panels.append(result["coarse"])
    panels.append(resize(result["blank_full_frame"]))
    return np.concatenate(panels, axis=1)


def erase_batch(manifest_path, pipeline: ErasePipeline, out_dir,
                parts=("eyebrows", "eyes", "nose", "mouth")) -> dict:
    """Process a JSONL manifest of {image, landmarks} pairs; writes a result
    image and an intermediate grid per record plus a JSON report. Per-record
    failures are logged, not fatal."""
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    if not records:
        raise PipelineError(f"empty manifest {manifest_path}")

    base = manifest_path.parent
    report = {"results": [], "failures": []}
    for i, rec in enumerate(records):
        name = Path(rec["image"]).stem
        try:
            img = imaging.load_image_rgb(base / rec["image"])
            lm = validate_landmarks(json.load(open(base / rec["landmarks"])))
            result = pipeline.erase(img, lm, parts)
            out_path = out_dir / f"{name}_blank.png"
            grid_path = out_dir / f"{name}_grid.png"
            imaging.save_image_rgb(out_path, result["blank_full_frame"])
            imaging.save_image_rgb(grid_path, intermediate_grid(img, result))
            report["results"].append({"record": name, "output": out_path.name,
                                      "grid": grid_path.name})
        except Exception as e:  # noqa: BLE001 - per-record isolation
            log.warning("record %s failed: %s", name, e)
            report["failures"].append({"record": name, "error": str(e)})
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
