"""Two-phase training: phase 1 fits the edge-completion GAN alone; phase 2
jointly fits the pixel-clone and refine networks against the frozen edge
net. Single-device, bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, imaging, losses, models
from .losses import LossWeights, PerceptualExtractor
from .models import DiscriminatorSpec, GeneratorSpec

log = logging.getLogger(__name__)


class TrainerError(RuntimeError):
    pass


class TrainingDiverged(TrainerError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    image_size: int = 256
    batch_size: int = 8
    beta1: float = 0.0
    beta2: float = 0.9
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-5
    phase1_steps: int = 1_000_000
    phase2_steps: int = 1_000_000
    seed: int = 0
    checkpoint_every: int = 10_000
    keep_checkpoints: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    generator_spec: GeneratorSpec = field(default_factory=GeneratorSpec)
    disc_base_channels: int = 64
    perceptual_width: float = 1.0
    perceptual_seed: int = 0
    pc_hole_only: bool = False
    canny_sigma: float = imaging.CANNY_SIGMA
    canny_low: float = imaging.CANNY_LOW
    canny_high: float = imaging.CANNY_HIGH

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.lr_discriminator >= self.lr_generator:
            raise TrainerError("discriminator learning rate must be below the generator's")

    def discriminator_spec(self):
        return DiscriminatorSpec(base_channels=self.disc_base_channels)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "batch_size": self.batch_size,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "lr_generator": self.lr_generator,
            "lr_discriminator": self.lr_discriminator,
            "phase1_steps": self.phase1_steps,
            "phase2_steps": self.phase2_steps,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "keep_checkpoints": self.keep_checkpoints,
            "loss_weights": self.loss_weights.to_config(),
            "generator_spec": self.generator_spec.to_dict(),
            "disc_base_channels": self.disc_base_channels,
            "perceptual_width": self.perceptual_width,
            "perceptual_seed": self.perceptual_seed,
            "pc_hole_only": self.pc_hole_only,
            "canny_sigma": self.canny_sigma,
            "canny_low": self.canny_low,
            "canny_high": self.canny_high,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights.from_config(d["loss_weights"])
        if "generator_spec" in d:
            d["generator_spec"] = GeneratorSpec.from_dict(d["generator_spec"])
        return cls(**d)


class BlankFaceDataset:
    """Pools of blank-face images and hole masks, paired uniformly at
    random each step. Grayscale and Canny edge maps are cached per image."""

    def __init__(self, images, masks, config: TrainConfig):
        if not images or not masks:
            raise TrainerError("dataset needs at least one image and one mask")
        size = config.image_size
        self.images, self.grays, self.edges = [], [], []
        for img in images:
            img = imaging.validate_image(img)
            if img.shape[:2] != (size, size):
                raise TrainerError(f"image size {img.shape[:2]} != configured {size}")
            gray = imaging.to_grayscale(img)
            self.images.append(img)
            self.grays.append(gray)
            self.edges.append(imaging.canny_edges(gray, config.canny_sigma,
                                                  config.canny_low, config.canny_high))
        self.masks = []
        for m in masks:
            m = imaging.validate_mask(m)
            if m.shape != (size, size):
                raise TrainerError(f"mask size {m.shape} != configured {size}")
            self.masks.append(m)

    @classmethod
    def from_manifest(cls, dataset_dir, config: TrainConfig, split="train"):
        dataset_dir = Path(dataset_dir)
        with open(dataset_dir / "manifest.json") as f:
            manifest = json.load(f)
        images = [imaging.load_image_rgb(dataset_dir / p) for p in manifest[split]["images"]]
        masks = [imaging.load_mask_png(dataset_dir / p) for p in manifest[split]["masks"]]
        return cls(images, masks, config)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        img_idx = rng.integers(len(self.images), size=batch_size)
        mask_idx = rng.integers(len(self.masks), size=batch_size)
        return self.make_batch(img_idx, mask_idx)

    def make_batch(self, img_idx, mask_idx):
        def stack(arrays, idx, channels_last=False):
            a = np.stack([arrays[i] for i in idx])
            t = torch.from_numpy(a)
            if channels_last:
                t = t.permute(0, 3, 1, 2)
            else:
                t = t.unsqueeze(1)
            return t.contiguous()

        batch = {
            "gt": stack(self.images, img_idx, channels_last=True),
            "gray_gt": stack(self.grays, img_idx),
            "edge_gt": stack(self.edges, img_idx),
            "mask": stack(self.masks, mask_idx),
            "img_idx": [int(i) for i in img_idx],
            "mask_idx": [int(i) for i in mask_idx],
        }
        keep = 1.0 - batch["mask"]
        batch["img_in"] = batch["gt"] * keep
        batch["gray_in"] = batch["gray_gt"] * keep
        batch["edge_in"] = batch["edge_gt"] * keep
        return batch


@dataclass
class TrainState:
    phase: str
    step: int
    nets: dict
    optimizers: dict
    rng: np.random.Generator
    config: TrainConfig
    loss_history: list = field(default_factory=list)

    def weights_hash(self, net_name: str) -> str:
        return checkpoint.weights_hash(self.nets[net_name])


def _adam(params, lr, config):
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2))


def build_phase1_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    g = models.EdgeGenerator(config.generator_spec)
    d = models.build_edge_discriminator(config.discriminator_spec())
    nets = {"edge_generator": g, "edge_discriminator": d}
    optimizers = {
        "edge_generator": _adam(g.parameters(), config.lr_generator, config),
        "edge_discriminator": _adam(d.parameters(), config.lr_discriminator, config),
    }
    return TrainState("edge", 0, nets, optimizers, np.random.default_rng(config.seed), config)


def build_phase2_state(config: TrainConfig, edge_generator) -> TrainState:
    torch.manual_seed(config.seed + 1)
    pc = models.PixelCloneGenerator(config.generator_spec)
    ref = models.RefineNet(config.generator_spec)
    d = models.build_inpaint_discriminator(config.discriminator_spec())
    edge_generator.eval()
    for p in edge_generator.parameters():
        p.requires_grad_(False)
    nets = {
        "edge_generator": edge_generator,
        "pixel_clone_generator": pc,
        "refine_net": ref,
        "inpaint_discriminator": d,
    }
    optimizers = {
        "generators": _adam(list(pc.parameters()) + list(ref.parameters()),
                            config.lr_generator, config),
        "inpaint_discriminator": _adam(d.parameters(), config.lr_discriminator, config),
    }
    return TrainState("inpaint", 0, nets, optimizers, np.random.default_rng(config.seed + 1),
                      config)


def phase1_step(state: TrainState, batch) -> dict:
    config = state.config
    g = state.nets["edge_generator"]
    d = state.nets["edge_discriminator"]
    g.train()
    d.train()

    edge_fake = g(batch["gray_in"], batch["edge_in"], batch["mask"])
    real_pair = torch.cat([batch["edge_gt"], batch["gray_gt"]], dim=1)
    fake_pair = torch.cat([edge_fake, batch["gray_gt"]], dim=1)

    # discriminator step
    d_real, real_feats = d(real_pair, return_features=True)
    d_fake = d(fake_pair.detach())
    d_loss = losses.adversarial_loss(d_real, d_fake, "discriminator")
    state.optimizers["edge_discriminator"].zero_grad()
    d_loss.backward()
    state.optimizers["edge_discriminator"].step()

    # generator step
    d_fake_g, fake_feats = d(fake_pair, return_features=True)
    adv = losses.adversarial_loss(None, d_fake_g, "generator")
    fm = losses.feature_matching_loss(fake_feats, [f.detach() for f in real_feats])
    g_loss = losses.total_edge_loss(adv, fm, config.loss_weights)
    state.optimizers["edge_generator"].zero_grad()
    g_loss.backward()
    state.optimizers["edge_generator"].step()

    return {
        "d_loss": float(d_loss.detach()),
        "g_loss": float(g_loss.detach()),
        "adv": float(adv.detach()),
        "fm": float(fm.detach()),
    }


def phase2_step(state: TrainState, batch, extractor: PerceptualExtractor) -> dict:
    config = state.config
    edge_gen = state.nets["edge_generator"]
    pc_gen = state.nets["pixel_clone_generator"]
    refine = state.nets["refine_net"]
    d = state.nets["inpaint_discriminator"]
    pc_gen.train()
    refine.train()
    d.train()

    with torch.no_grad():
        edge_hat = edge_gen(batch["gray_in"], batch["edge_in"], batch["mask"]).detach()

    flow = pc_gen(edge_hat, batch["img_in"], batch["mask"])
    coarse = models.warp(batch["img_in"], flow)
    raw = refine(coarse, batch["img_in"], flow)
    fake = models.composite(raw, batch["img_in"], batch["mask"])

    real_pair = torch.cat([batch["gt"], edge_hat], dim=1)
    fake_pair = torch.cat([fake, edge_hat], dim=1)

    d_real = d(real_pair)
    d_fake = d(fake_pair.detach())
    d_loss = losses.adversarial_loss(d_real, d_fake, "discriminator")
    state.optimizers["inpaint_discriminator"].zero_grad()
    d_loss.backward()
    state.optimizers["inpaint_discriminator"].step()

    components = {
        "adv": losses.adversarial_loss(None, d(fake_pair), "generator"),
        "perc": losses.perceptual_loss(fake, batch["gt"], extractor),
        "l1": losses.l1_loss(fake, batch["gt"]),
        "style": losses.style_loss(fake, batch["gt"], extractor),
        "pc": losses.pixel_clone_loss(
            coarse, batch["gt"], batch["mask"] if config.pc_hole_only else None),
    }
    g_loss = losses.total_inpaint_loss(components, config.loss_weights)
    state.optimizers["generators"].zero_grad()
    g_loss.backward()
    state.optimizers["generators"].step()

    out = {"d_loss": float(d_loss.detach()), "g_loss": float(g_loss.detach())}
    out.update({k: float(v.detach()) for k, v in components.items()})
    out["flow_variance"] = float(flow.detach().var(dim=(2, 3)).mean())
    return out


def _run_loop(state: TrainState, dataset, steps, step_fn, out_dir=None, metrics_fh=None):
    config = state.config
    target = state.step + steps
    while state.step < target:
        batch = dataset.sample_batch(state.rng, config.batch_size)
        try:
            metrics = step_fn(batch)
        except losses.DivergenceError as e:
            raise TrainingDiverged(
                f"non-finite loss at step {state.step}: {e}",
                diagnostics={"step": state.step, "phase": state.phase,
                             "batch_images": batch["img_idx"],
                             "batch_masks": batch["mask_idx"]},
            ) from e
        state.step += 1
        record = {"step": state.step, "phase": state.phase, **metrics}
        state.loss_history.append(record)
        if metrics_fh is not None:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
        if out_dir is not None and state.step % config.checkpoint_every == 0:
            save_state(state, Path(out_dir) / f"step_{state.step:08d}")
            _prune_checkpoints(Path(out_dir), config.keep_checkpoints)
    return state


def train_phase1(dataset, config: TrainConfig, steps=None, out_dir=None,
                 metrics_fh=None, state: TrainState | None = None) -> TrainState:
    """Alternating D/G optimization of the edge-completion GAN."""
    if state is None:
        state = build_phase1_state(config)
    steps = config.phase1_steps if steps is None else steps
    return _run_loop(state, dataset, steps, lambda b: phase1_step(state, b),
                     out_dir, metrics_fh)


def train_phase2(dataset, config: TrainConfig, edge_generator, steps=None,
                 out_dir=None, metrics_fh=None, state: TrainState | None = None,
                 extractor: PerceptualExtractor | None = None) -> TrainState:
    """Joint pixel-clone + refine training with the edge net frozen; the
    edge weights are hash-checked before and after."""
    if state is None:
        state = build_phase2_state(config, edge_generator)
    if extractor is None:
        extractor = PerceptualExtractor(config.perceptual_width, config.perceptual_seed)
    steps = config.phase2_steps if steps is None else steps
    edge_hash = state.weights_hash("edge_generator")
    result = _run_loop(state, dataset, steps,
                       lambda b: phase2_step(state, b, extractor), out_dir, metrics_fh)
    if result.weights_hash("edge_generator") != edge_hash:
        raise TrainerError("edge-network weights changed during phase 2")
    return result


def run_inference(nets: dict, img_in, gray_in, edge_in, mask):
    """Full generator stack on prepared tensors; returns all intermediates."""
    edge_gen = nets["edge_generator"]
    pc_gen = nets["pixel_clone_generator"]
    refine = nets["refine_net"]
    with torch.no_grad():
        edge_gen.eval(), pc_gen.eval(), refine.eval()
        edge_hat = edge_gen(gray_in, edge_in, mask)
        flow = pc_gen(edge_hat, img_in, mask)
        coarse = models.warp(img_in, flow)
        raw = refine(coarse, img_in, flow)
        fake = models.composite(raw, img_in, mask)
    return {"edge_hat": edge_hat, "flow": flow, "coarse": coarse, "raw": raw,
            "output": fake}


PSNR_CAP = 100.0


def psnr(fake: np.ndarray, real: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(fake, dtype=np.float64) - np.asarray(real, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def evaluate(dataset: BlankFaceDataset, nets: dict, config: TrainConfig) -> dict:
    """PSNR and MAE of composited outputs over a fixed image<->mask pairing
    (seeded once so trends are comparable across runs)."""
    n = len(dataset.images)
    if n == 0:
        raise TrainerError("validation set is empty")
    rng = np.random.default_rng(config.seed + 12345)
    mask_idx = rng.integers(len(dataset.masks), size=n)
    psnrs, maes = [], []
    for i in range(n):
        batch = dataset.make_batch([i], [mask_idx[i]])
        out = run_inference(nets, batch["img_in"], batch["gray_in"],
                            batch["edge_in"], batch["mask"])
        fake = out["output"][0].permute(1, 2, 0).numpy()
        real = dataset.images[i]
        psnrs.append(psnr(fake, real))
        maes.append(float(np.abs(fake.astype(np.float64) - real).mean()))
    psnrs, maes = np.array(psnrs), np.array(maes)
    se = lambda a: float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
    return {"psnr": float(psnrs.mean()), "psnr_se": se(psnrs),
            "mae": float(maes.mean()), "mae_se": se(maes)}


def masked_edge_f1(pred_edge, gt_edge, mask, threshold=0.5) -> float:
    """F1 of thresholded predicted edges vs ground-truth edges over hole
    pixels."""
    pred = (np.asarray(pred_edge) >= threshold) & (np.asarray(mask) > 0)
    gt = (np.asarray(gt_edge) > 0.5) & (np.asarray(mask) > 0)
    tp = float((pred & gt).sum())
    fp = float((pred & ~gt).sum())
    fn = float((~pred & gt).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Serialization: spec-format weight blobs plus a torch-serialized training
# tail (optimizer moments, RNG states) for bit-exact resume.

def save_state(state: TrainState, ckpt_dir) -> None:
    ckpt_dir = Path(ckpt_dir)
    checkpoint.save_checkpoint(
        ckpt_dir, state.nets, step=state.step, seed=state.config.seed,
        phase=state.phase, generator_spec=state.config.generator_spec,
        extra={"config": state.config.to_dict()},
    )
    tail = {
        "optimizers": {k: opt.state_dict() for k, opt in state.optimizers.items()},
        "torch_rng": torch.get_rng_state(),
        "np_rng": state.rng.bit_generator.state,
    }
    torch.save(tail, ckpt_dir / "trainstate.pt")


def load_state(ckpt_dir, config: TrainConfig | None = None) -> TrainState:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "manifest.json") as f:
        manifest = json.load(f)
    if config is None:
        config = TrainConfig.from_dict(manifest["config"])
    phase = manifest["phase"]
    if phase == "edge":
        state = build_phase1_state(config)
    else:
        edge_gen = models.EdgeGenerator(config.generator_spec)
        state = build_phase2_state(config, edge_gen)
    checkpoint.load_checkpoint(ckpt_dir, state.nets)
    tail_path = ckpt_dir / "trainstate.pt"
    if tail_path.exists():
        tail = torch.load(tail_path, weights_only=False)
        for k, opt in state.optimizers.items():
            opt.load_state_dict(tail["optimizers"][k])
        torch.set_rng_state(tail["torch_rng"])
        state.rng = np.random.default_rng()
        state.rng.bit_generator.state = tail["np_rng"]
    state.step = manifest["step"]
    return state


def _prune_checkpoints(out_dir: Path, keep: int) -> None:
    import shutil

    ckpts = sorted(out_dir.glob("step_*"))
    for stale in ckpts[:-keep]:
        shutil.rmtree(stale)
