"""Training objectives: adversarial (edge and inpaint phases), feature
matching, perceptual, style (Gram), L1 and pixel-clone losses, plus the
weighted totals.

Perceptual and style losses use a frozen VGG-19-topology extractor tapped
at relu1_1, relu2_1, relu3_1, relu4_1 and relu5_1. ImageNet weights are
not bundled; by default the extractor is deterministically seeded with
Kaiming-scaled random weights (random VGG features still induce a useful
perceptual metric and keep runs reproducible offline).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOG_EPS = 1e-7

PERCEPTUAL_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DivergenceError(RuntimeError):
    """A loss component became non-finite."""


@dataclass
class LossWeights:
    edge_adv: float = 1.0
    edge_fm: float = 10.0
    inpaint_adv: float = 0.1
    inpaint_perc: float = 1.0
    inpaint_l1: float = 1.0
    inpaint_style: float = 500.0
    inpaint_pc: float = 1.0

    def to_config(self) -> dict:
        return {
            "edge": {"adv": self.edge_adv, "fm": self.edge_fm},
            "inpaint": {
                "adv": self.inpaint_adv,
                "perc": self.inpaint_perc,
                "l1": self.inpaint_l1,
                "style": self.inpaint_style,
                "pc": self.inpaint_pc,
            },
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "LossWeights":
        edge = cfg.get("edge", {})
        inp = cfg.get("inpaint", {})
        defaults = cls()
        return cls(
            edge_adv=edge.get("adv", defaults.edge_adv),
            edge_fm=edge.get("fm", defaults.edge_fm),
            inpaint_adv=inp.get("adv", defaults.inpaint_adv),
            inpaint_perc=inp.get("perc", defaults.inpaint_perc),
            inpaint_l1=inp.get("l1", defaults.inpaint_l1),
            inpaint_style=inp.get("style", defaults.inpaint_style),
            inpaint_pc=inp.get("pc", defaults.inpaint_pc),
        )


def _clamped_log(x):
    return torch.log(x.clamp(LOG_EPS, 1.0 - LOG_EPS))


def adversarial_loss(d_real, d_fake, side: str):
    """Patch-score adversarial loss over post-sigmoid scores. The generator
    side uses the non-saturating -log D(fake) form."""
    if side == "discriminator":
        return -(_clamped_log(d_real).mean() + _clamped_log(1.0 - d_fake).mean())
    if side == "generator":
        return -_clamped_log(d_fake).mean()
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def feature_matching_loss(fake_features, real_features):
    """Sum over layers of the per-element L1 distance between discriminator
    activations on fake and real inputs; real activations are constants."""
    if len(fake_features) != len(real_features):
        raise ValueError("feature stacks differ in layer count")
    total = 0.0
    for f, r in zip(fake_features, real_features):
        if f.shape != r.shape:
            raise ValueError(f"feature shape mismatch: {tuple(f.shape)} vs {tuple(r.shape)}")
        total = total + F.l1_loss(f, r.detach())
    return total


class PerceptualExtractor(nn.Module):
    """Frozen VGG-19 feature stack up to relu5_1.

    width_mult scales every channel count (1.0 = standard VGG-19 widths);
    weights are deterministic for a given seed.
    """

    # convs per block and block output channels of VGG-19
    BLOCKS = ((2, 64), (2, 128), (4, 256), (4, 512), (1, 512))

    def __init__(self, width_mult: float = 1.0, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        self._tap_indices = []
        in_ch = 3
        for b, (n_convs, ch) in enumerate(self.BLOCKS):
            ch = max(int(round(ch * width_mult)), 4)
            for i in range(n_convs):
                conv = nn.Conv2d(in_ch, ch, 3, padding=1)
                with torch.no_grad():
                    fan_in = in_ch * 9
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                      * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
                layers.append(conv)
                layers.append(nn.ReLU(inplace=False))
                if i == 0:
                    self._tap_indices.append(len(layers) - 1)  # reluN_1
                in_ch = ch
            if b < len(self.BLOCKS) - 1:
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
        self.features = nn.Sequential(*layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.eval()

    def forward(self, x):
        if x.shape[1] != 3:
            raise ValueError("perceptual extractor expects 3-channel input")
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self._tap_indices:
                taps.append(x)
        return taps

    @property
    def layer_names(self):
        return PERCEPTUAL_LAYERS


def perceptual_loss(fake, real, extractor: PerceptualExtractor):
    """Sum over the five tap layers of per-element L1 feature distance."""
    fake_feats = extractor(fake)
    with torch.no_grad():
        real_feats = extractor(real)
    return sum(F.l1_loss(f, r) for f, r in zip(fake_feats, real_feats))


def gram_matrix(features):
    """C x C Gram matrix of a (C, H, W) or (N, C, H, W) feature map,
    normalized by C*H*W."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    gram = flat @ flat.transpose(1, 2) / (c * h * w)
    return gram[0] if squeeze else gram


def style_loss(fake, real, extractor: PerceptualExtractor):
    """Sum over tap layers of the entrywise L1 distance between Gram
    matrices (mean over the batch)."""
    fake_feats = extractor(fake)
    with torch.no_grad():
        real_feats = extractor(real)
    total = 0.0
    for f, r in zip(fake_feats, real_feats):
        diff = (gram_matrix(f) - gram_matrix(r)).abs()
        total = total + diff.sum(dim=(-2, -1)).mean()
    return total


def l1_loss(fake, real):
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    return (fake - real).abs().mean()


def pixel_clone_loss(warped, real, mask=None):
    """Mean absolute difference between the warped coarse result and the
    ground truth; with a mask, averaged over hole pixels only."""
    if warped.shape != real.shape:
        raise ValueError(f"shape mismatch: {tuple(warped.shape)} vs {tuple(real.shape)}")
    if mask is None:
        return (warped - real).abs().mean()
    diff = ((warped - real).abs() * mask).sum()
    return diff / mask.expand_as(warped).sum().clamp_min(1.0)


def total_edge_loss(adv, fm, weights: LossWeights):
    total = weights.edge_adv * adv + weights.edge_fm * fm
    if not torch.isfinite(total):
        raise DivergenceError(f"edge loss diverged: adv={adv}, fm={fm}")
    return total


def total_inpaint_loss(components: dict, weights: LossWeights):
    """Weighted sum of {adv, perc, l1, style, pc} component scalars."""
    for name, value in components.items():
        v = value if torch.is_tensor(value) else torch.tensor(float(value))
        if not torch.isfinite(v):
            raise DivergenceError(f"inpaint loss component {name!r} is non-finite: {value}")
    w = {
        "adv": weights.inpaint_adv,
        "perc": weights.inpaint_perc,
        "l1": weights.inpaint_l1,
        "style": weights.inpaint_style,
        "pc": weights.inpaint_pc,
    }
    unknown = set(components) - set(w)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    return sum(w[name] * components[name] for name in components)
