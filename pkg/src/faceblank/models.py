"""Network architectures: edge-completion generator, pixel-clone flow
generator, channel-attention refine U-Net, 70x70 PatchGAN discriminators
with spectral normalization, and the differentiable flow warp.

Conventions: tensors are N x C x H x W float; images live in [0, 1]; flow
fields are 2-channel offsets in (-1, 1) where +-1 reaches half the image
extent (so +1 in x means an offset of W/2 pixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F


class DimensionError(ValueError):
    pass


@dataclass
class GeneratorSpec:
    """Shared topology of the edge and pixel-clone generators, plus the
    refine net's stage widths."""

    base_channels: int = 64
    n_residual: int = 8
    dilation: int = 2
    refine_channels: tuple = (64, 128, 256, 512, 512)
    channel_attention: bool = True
    attention_reduction: int = 16

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["refine_channels"] = tuple(d.get("refine_channels", (64, 128, 256, 512, 512)))
        return cls(**d)


@dataclass
class DiscriminatorSpec:
    base_channels: int = 64
    spectral_norm: bool = True
    # (kernel, stride) per conv layer; this table fixes the receptive field
    layers: tuple = ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1))

    def receptive_field(self) -> int:
        """Receptive field of one output logit, from the layer table."""
        rf, jump = 1, 1
        for k, s in self.layers:
            rf += (k - 1) * jump
            jump *= s
        return rf


def _check_divisible(h, w, factor):
    if h % factor or w % factor:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by {factor}")


class SpectralNormConv2d(nn.Module):
    """Conv2d whose weight is divided by its largest singular value,
    estimated by persistent power iteration."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0,
                 n_power_iterations=5):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding)
        self.n_power_iterations = n_power_iterations
        w = self.conv.weight
        o, m = w.shape[0], w[0].numel()
        # a small block of vectors instead of a single u: plain power
        # iteration stalls when the top singular values nearly tie
        k = max(1, min(4, o, m))
        self.register_buffer("weight_u", torch.linalg.qr(torch.randn(o, k))[0])
        # converge on the initial weights; per-forward iterations then only
        # need to track the slow drift during training
        self.power_iterate(50)

    def power_iterate(self, n: int) -> None:
        w = self.conv.weight.detach().flatten(1)
        u = self.weight_u
        with torch.no_grad():
            for _ in range(n):
                v = torch.linalg.qr(w.t() @ u)[0]
                u = torch.linalg.qr(w @ v)[0]
            self.weight_u.copy_(u)

    def _sigma(self):
        self.power_iterate(self.n_power_iterations)
        w = self.conv.weight.flatten(1)
        # clone: the buffer is updated in place by later forwards while this
        # sigma may still sit in an autograd graph
        u = self.weight_u.detach().clone()
        wd = w.detach()
        v = torch.linalg.qr(wd.t() @ u)[0]
        # top singular pair of the projected block, lifted back; sigma stays
        # a rank-1 bilinear form so the gradient matches standard SN
        pu, _, pvh = torch.linalg.svd(u.t() @ wd @ v)
        u1 = u @ pu[:, 0]
        v1 = v @ pvh[0]
        return torch.dot(u1, w @ v1)

    def normalized_weight(self):
        return self.conv.weight / self._sigma()

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.conv.bias,
                        self.conv.stride, self.conv.padding)


class ResidualBlock(nn.Module):
    """EdgeConnect-style residual block with a dilated first conv."""

    def __init__(self, dim, dilation=2):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=dilation, dilation=dilation),
            nn.InstanceNorm2d(dim),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class EncoderDecoderGenerator(nn.Module):
    """Two-stride-2 encoder, dilated residual trunk, nearest-upsample
    decoder. Head activation differs between the edge and flow variants."""

    def __init__(self, in_channels, out_channels, head, spec: GeneratorSpec):
        super().__init__()
        c = spec.base_channels
        self.head = head
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, c, 7, padding=3),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c),
            nn.ReLU(inplace=True),
        )
        self.trunk = nn.Sequential(
            *[ResidualBlock(4 * c, spec.dilation) for _ in range(spec.n_residual)]
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1),
            nn.InstanceNorm2d(2 * c),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1),
            nn.InstanceNorm2d(c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, out_channels, 7, padding=3),
        )

    def forward(self, x):
        _check_divisible(x.shape[2], x.shape[3], 4)
        out = self.decoder(self.trunk(self.encoder(x)))
        if self.head == "sigmoid":
            return torch.sigmoid(out)
        return torch.tanh(out)


class EdgeGenerator(EncoderDecoderGenerator):
    """E_hat = G(gray, masked_edges, mask); full-resolution map in (0, 1)."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__(in_channels=3, out_channels=1, head="sigmoid", spec=spec)

    def forward(self, gray, edges_masked, mask):
        return super().forward(torch.cat([gray, edges_masked, mask], dim=1))


class PixelCloneGenerator(EncoderDecoderGenerator):
    """Flow = G(edge_completed, image, mask); 2-channel field in (-1, 1)."""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__(in_channels=5, out_channels=2, head="tanh", spec=spec)
        # zero-init the flow head so the warp starts as the identity; any
        # structure in the field is then learned, not inherited from init
        final = self.decoder[-1]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)

    def forward(self, edge_completed, img, mask):
        return super().forward(torch.cat([edge_completed, img, mask], dim=1))


def warp(img: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear-sample img at p + flow[p] * (W/2, H/2); clamp-to-edge
    beyond the borders; differentiable w.r.t. both inputs."""
    n, _, h, w = img.shape
    if flow.shape[1] != 2 or flow.shape[2:] != img.shape[2:] or flow.shape[0] != n:
        raise DimensionError(f"flow shape {tuple(flow.shape)} does not match image {tuple(img.shape)}")
    device, dtype = img.device, img.dtype
    c = img.shape[1]
    ys = torch.arange(h, device=device, dtype=dtype)
    xs = torch.arange(w, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    # clamp-to-edge, then bilinear by hand: zero flow reproduces the input
    # exactly, which grid_sample's coordinate renormalization does not
    px = (gx.unsqueeze(0) + flow[:, 0] * (w / 2.0)).clamp(0, w - 1)
    py = (gy.unsqueeze(0) + flow[:, 1] * (h / 2.0)).clamp(0, h - 1)
    x0 = px.detach().floor().clamp(0, max(w - 2, 0))
    y0 = py.detach().floor().clamp(0, max(h - 2, 0))
    fx = (px - x0).unsqueeze(1)
    fy = (py - y0).unsqueeze(1)

    flat = img.reshape(n, c, h * w)
    x0l, y0l = x0.long(), y0.long()
    x1l, y1l = (x0l + 1).clamp(max=w - 1), (y0l + 1).clamp(max=h - 1)

    def sample(xi, yi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    v00, v01 = sample(x0l, y0l), sample(x1l, y0l)
    v10, v11 = sample(x0l, y1l), sample(x1l, y1l)
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bottom * fy


class ChannelAttention(nn.Module):
    """Squeeze (global average pool), two linear layers, sigmoid gate.
    When disabled the gate is the identity, which reproduces the
    no-attention ablation variant with the same remaining weights."""

    def __init__(self, channels, reduction=16, enabled=True):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.enabled = enabled
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )
        self.force_identity_gate = False  # diagnostic switch for tests

    def forward(self, x):
        if not self.enabled or self.force_identity_gate:
            return x
        return x * self.gate(x)


class RefineResBlock(nn.Module):
    """Two 3x3 convs plus channel attention; 1x1 shortcut when the channel
    count or resolution changes."""

    def __init__(self, in_ch, out_ch, stride=1, attention=True, reduction=16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
        )
        self.attention = ChannelAttention(out_ch, reduction, enabled=attention)
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        return self.shortcut(x) + self.attention(self.body(x))


class RefineNet(nn.Module):
    """U-Net with 5 downsampling and 5 upsampling residual stages, additive
    skip connections and channel attention in every residual block.

    Inputs: coarse warp result (3ch), original image (3ch), flow (2ch).
    Output in [0, 1].
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        widths = spec.refine_channels
        att, red = spec.channel_attention, spec.attention_reduction
        self.stem = nn.Sequential(
            nn.Conv2d(8, widths[0], 3, padding=1),
            nn.InstanceNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        downs = []
        prev = widths[0]
        for wd in widths:
            downs.append(RefineResBlock(prev, wd, stride=2, attention=att, reduction=red))
            prev = wd
        self.downs = nn.ModuleList(downs)
        # up-stage widths mirror the skip tensors collected on the way down
        skip_widths = [widths[0]] + list(widths[:-1])
        ups = []
        for wd in skip_widths[::-1]:
            ups.append(RefineResBlock(prev, wd, stride=1, attention=att, reduction=red))
            prev = wd
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(widths[0], 3, 3, padding=1)

    def forward(self, coarse, img, flow):
        h, w = coarse.shape[2], coarse.shape[3]
        _check_divisible(h, w, 2 ** len(self.downs))
        x = self.stem(torch.cat([coarse, img, flow], dim=1))
        skips = []
        for block in self.downs:
            skips.append(x)
            x = block(x)
        for block, skip in zip(self.ups, skips[::-1]):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x) + skip  # additive skip join
        return torch.sigmoid(self.head(x))


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: spectrally normalized convs, leaky ReLU (slope 0.2)
    everywhere except the sigmoid-activated last layer."""

    def __init__(self, in_channels, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        widths = [c, 2 * c, 4 * c, 8 * c, 1]
        conv = SpectralNormConv2d if spec.spectral_norm else nn.Conv2d
        layers = []
        prev = in_channels
        for (k, s), wd in zip(spec.layers, widths):
            if s == 1:
                # asymmetric same-padding keeps stride-1 layers size-preserving,
                # so the score grid is exactly H/2^k x W/2^k
                layers.append(nn.ZeroPad2d(((k - 1) // 2, k // 2, (k - 1) // 2, k // 2)))
                layers.append(conv(prev, wd, k, stride=1, padding=0))
            else:
                layers.append(conv(prev, wd, k, stride=s, padding=(k - 1) // 2))
            if wd != 1:
                layers.append(nn.LeakyReLU(0.2, inplace=True))
            prev = wd
        self.layers = nn.ModuleList(layers)
        self.in_channels = in_channels

    def forward(self, x, return_features=False):
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"discriminator expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        features = []
        for layer in self.layers:
            x = layer(x)
            if isinstance(layer, nn.LeakyReLU):
                features.append(x)
        scores = torch.sigmoid(x)
        if return_features:
            return scores, features
        return scores


def build_edge_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec()):
    """Consumes (edge map, grayscale image)."""
    return PatchDiscriminator(in_channels=2, spec=spec)


def build_inpaint_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec()):
    """Consumes (RGB image, completed edge map)."""
    return PatchDiscriminator(in_channels=4, spec=spec)


def composite(raw: torch.Tensor, img_visible: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """In-hole composition: generator output inside the hole, untouched
    input pixels outside."""
    return raw * mask + img_visible * (1.0 - mask)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
