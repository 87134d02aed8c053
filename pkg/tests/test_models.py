import numpy as np
import pytest
import torch

from faceblank import models
from faceblank.models import (
    DiscriminatorSpec,
    GeneratorSpec,
    EdgeGenerator,
    PixelCloneGenerator,
    RefineNet,
    PatchDiscriminator,
    SpectralNormConv2d,
    warp,
)

SMALL = GeneratorSpec(base_channels=8, n_residual=2)

torch.manual_seed(0)


class TestEdgeGenerator:
    def test_shape_and_range_256(self):
        g = EdgeGenerator(SMALL)
        out = g(torch.rand(1, 1, 256, 256), torch.rand(1, 1, 256, 256),
                torch.rand(1, 1, 256, 256).round())
        assert out.shape == (1, 1, 256, 256)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_indivisible_size_rejected(self):
        g = EdgeGenerator(SMALL)
        with pytest.raises(models.DimensionError):
            g(torch.rand(1, 1, 250, 250), torch.rand(1, 1, 250, 250),
              torch.rand(1, 1, 250, 250))

    def test_parameter_count_closed_form(self):
        c, blocks = 16, 3
        g = EdgeGenerator(GeneratorSpec(base_channels=c, n_residual=blocks))

        def conv(k, cin, cout):
            return k * k * cin * cout + cout

        expected = (
            conv(7, 3, c) + conv(4, c, 2 * c) + conv(4, 2 * c, 4 * c)
            + blocks * (conv(3, 4 * c, 4 * c) + conv(3, 4 * c, 4 * c))
            + conv(3, 4 * c, 2 * c) + conv(3, 2 * c, c) + conv(7, c, 1)
        )
        assert models.count_parameters(g) == expected

    def test_deterministic_forward(self):
        g = EdgeGenerator(SMALL).eval()
        inputs = (torch.rand(1, 1, 32, 32), torch.rand(1, 1, 32, 32),
                  torch.rand(1, 1, 32, 32).round())
        with torch.no_grad():
            assert torch.equal(g(*inputs), g(*inputs))


class TestPixelCloneGenerator:
    def test_output_channels_and_range(self):
        g = PixelCloneGenerator(SMALL)
        flow = g(torch.rand(2, 1, 32, 32), torch.rand(2, 3, 32, 32),
                 torch.rand(2, 1, 32, 32).round())
        assert flow.shape == (2, 2, 32, 32)
        assert flow.min() > -1.0 and flow.max() < 1.0

    def test_zero_head_gives_identity_warp(self):
        g = PixelCloneGenerator(SMALL)
        with torch.no_grad():
            g.decoder[-1].weight.zero_()
            g.decoder[-1].bias.zero_()
        img = torch.rand(1, 3, 16, 16)
        flow = g(torch.rand(1, 1, 16, 16), img, torch.zeros(1, 1, 16, 16))
        assert torch.all(flow == 0)
        assert torch.allclose(warp(img, flow), img, atol=1e-6)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        g = PixelCloneGenerator(GeneratorSpec(base_channels=4, n_residual=1)).double()
        edge = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        img = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        mask = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        probe = torch.randn(1, 2, 8, 8, dtype=torch.float64)

        out = (g(edge, img, mask) * probe).sum()
        (grad,) = torch.autograd.grad(out, img)

        eps = 1e-4
        rng = np.random.default_rng(2)
        for _ in range(10):
            c, r, col = rng.integers(3), rng.integers(8), rng.integers(8)
            delta = torch.zeros_like(img)
            delta[0, c, r, col] = eps
            with torch.no_grad():
                f_plus = (g(edge, img + delta, mask) * probe).sum()
                f_minus = (g(edge, img - delta, mask) * probe).sum()
            fd = (f_plus - f_minus) / (2 * eps)
            an = grad[0, c, r, col]
            denom = max(abs(fd.item()), abs(an.item()), 1e-6)
            assert abs(fd.item() - an.item()) / denom < 1e-3


class TestWarp:
    def test_zero_flow_identity(self):
        img = torch.rand(2, 3, 17, 23)
        out = warp(img, torch.zeros(2, 2, 17, 23))
        assert (out - img).abs().max() < 1e-6

    def test_one_pixel_shift(self):
        torch.manual_seed(3)
        img = torch.rand(1, 3, 8, 8)
        flow = torch.zeros(1, 2, 8, 8)
        flow[:, 0] = 2.0 / 8  # +1 pixel in x
        out = warp(img, flow)
        assert torch.allclose(out[..., :7], img[..., 1:], atol=1e-5)
        assert torch.allclose(out[..., 7], img[..., 7], atol=1e-5)  # clamp at border

    def test_bilinear_midpoint(self):
        img = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        flow = torch.zeros(1, 2, 2, 2)
        flow[0, 0, 0, 0] = 0.5  # +0.5 px in x (half extent = 1)
        flow[0, 1, 0, 0] = 0.5  # +0.5 px in y
        out = warp(img, flow)
        assert abs(out[0, 0, 0, 0].item() - 2.5) < 1e-6

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(4)
        rng = np.random.default_rng(5)
        eps = 1e-4
        for _ in range(5):
            img = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
            flow = (torch.rand(1, 2, 8, 8, dtype=torch.float64) - 0.5) * 0.8
            flow.requires_grad_(True)
            probe = torch.randn(1, 3, 8, 8, dtype=torch.float64)
            out = (warp(img, flow) * probe).sum()
            g_img, g_flow = torch.autograd.grad(out, (img, flow))
            for tensor, grad in ((img, g_img), (flow, g_flow)):
                flat = tensor.detach().flatten()
                gflat = grad.flatten()
                for idx in rng.integers(0, flat.numel(), 6):
                    delta = torch.zeros_like(flat)
                    delta[idx] = eps
                    with torch.no_grad():
                        tp = (tensor.detach() + delta.reshape(tensor.shape))
                        tm = (tensor.detach() - delta.reshape(tensor.shape))
                        if tensor is img:
                            fp = (warp(tp, flow.detach()) * probe).sum()
                            fm = (warp(tm, flow.detach()) * probe).sum()
                        else:
                            fp = (warp(img.detach(), tp) * probe).sum()
                            fm = (warp(img.detach(), tm) * probe).sum()
                    fd = ((fp - fm) / (2 * eps)).item()
                    an = gflat[idx].item()
                    denom = max(abs(fd), abs(an), 1e-6)
                    assert abs(fd - an) / denom < 1e-3


class TestRefineNet:
    def test_shape_and_range(self):
        net = RefineNet(GeneratorSpec(refine_channels=(8, 8, 16, 16, 16)))
        out = net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64),
                  torch.rand(1, 2, 64, 64) - 0.5)
        assert out.shape == (1, 3, 64, 64)
        assert out.min() > 0.0 and out.max() < 1.0

    def test_indivisible_size_rejected(self):
        net = RefineNet(GeneratorSpec(refine_channels=(8, 8, 16, 16, 16)))
        with pytest.raises(models.DimensionError):
            net(torch.rand(1, 3, 48, 48), torch.rand(1, 3, 48, 48),
                torch.rand(1, 2, 48, 48))

    def test_forced_identity_gate_matches_disabled_attention(self):
        spec_on = GeneratorSpec(refine_channels=(8, 8, 16, 16, 16), channel_attention=True)
        net_on = RefineNet(spec_on)
        spec_off = GeneratorSpec(refine_channels=(8, 8, 16, 16, 16), channel_attention=False)
        net_off = RefineNet(spec_off)
        net_off.load_state_dict(net_on.state_dict())  # identical weights
        for m in net_on.modules():
            if isinstance(m, models.ChannelAttention):
                m.force_identity_gate = True
        inputs = (torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64),
                  torch.rand(1, 2, 64, 64) - 0.5)
        with torch.no_grad():
            assert torch.equal(net_on(*inputs), net_off(*inputs))


class TestDiscriminator:
    def test_receptive_field_is_70(self):
        assert DiscriminatorSpec().receptive_field() == 70

    def test_output_grid_and_range(self):
        d = PatchDiscriminator(2, DiscriminatorSpec(base_channels=8))
        out = d(torch.rand(1, 2, 64, 64))
        assert out.shape[2] == 64 // 8 and out.shape[3] == 64 // 8
        assert out.min() > 0.0 and out.max() < 1.0

    def test_channel_mismatch_rejected(self):
        d = PatchDiscriminator(2, DiscriminatorSpec(base_channels=8))
        with pytest.raises(models.DimensionError):
            d(torch.rand(1, 3, 64, 64))

    def test_spectral_norm_bound(self):
        torch.manual_seed(7)
        d = PatchDiscriminator(4, DiscriminatorSpec(base_channels=8))
        d(torch.rand(1, 4, 64, 64))
        for m in d.modules():
            if isinstance(m, SpectralNormConv2d):
                m.power_iterate(200)
                w = m.normalized_weight().detach().flatten(1)
                sigma = torch.linalg.svdvals(w)[0].item()
                assert sigma <= 1.0 + 1e-3

    def test_scale_invariance_of_normalized_forward(self):
        torch.manual_seed(8)
        conv = SpectralNormConv2d(3, 5, 3, padding=1)
        conv.power_iterate(200)
        with torch.no_grad():
            conv.conv.bias.zero_()
        x = torch.rand(1, 3, 16, 16)
        with torch.no_grad():
            y1 = conv(x).clone()
            conv.conv.weight.mul_(2.0)
            y2 = conv(x)
        assert (y1 - y2).abs().max() < 1e-5

    def test_feature_stack_returned(self):
        d = PatchDiscriminator(2, DiscriminatorSpec(base_channels=8))
        scores, feats = d(torch.rand(1, 2, 64, 64), return_features=True)
        assert len(feats) == 4  # one per leaky-ReLU layer


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        from faceblank import checkpoint
        g = EdgeGenerator(SMALL)
        d = PatchDiscriminator(2, DiscriminatorSpec(base_channels=8))
        checkpoint.save_checkpoint(tmp_path, {"edge_generator": g, "edge_discriminator": d},
                                   step=7, seed=11, phase="edge", generator_spec=SMALL)
        g2 = EdgeGenerator(SMALL)
        d2 = PatchDiscriminator(2, DiscriminatorSpec(base_channels=8))
        manifest = checkpoint.load_checkpoint(tmp_path, {"edge_generator": g2,
                                                         "edge_discriminator": d2})
        assert manifest["step"] == 7 and manifest["seed"] == 11
        assert checkpoint.weights_hash(g) == checkpoint.weights_hash(g2)
        assert checkpoint.weights_hash(d) == checkpoint.weights_hash(d2)

    def test_shape_mismatch_rejected(self, tmp_path):
        from faceblank import checkpoint
        g = EdgeGenerator(SMALL)
        checkpoint.save_checkpoint(tmp_path, {"edge_generator": g}, step=0, seed=0,
                                   phase="edge", generator_spec=SMALL)
        other = EdgeGenerator(GeneratorSpec(base_channels=4, n_residual=2))
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_checkpoint(tmp_path, {"edge_generator": other})
