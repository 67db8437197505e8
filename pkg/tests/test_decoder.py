import pytest
import torch

from slotebm.decoder import SpatialBroadcastDecoder, combine_slots


def make_decoder(seed=0, **kwargs):
    torch.manual_seed(seed)
    defaults = dict(latent_dim=6, height=12, width=10, channels=5, n_layers=2)
    defaults.update(kwargs)
    return SpatialBroadcastDecoder(**defaults)


class TestBroadcastDecode:
    def test_output_shapes_match_grid(self):
        dec = make_decoder()
        rgb, alpha = dec.decode_slots(torch.randn(2, 3, 6))
        assert rgb.shape == (2, 3, 3, 12, 10)
        assert alpha.shape == (2, 3, 12, 10)

    def test_zero_weights_give_constant_bias_output(self):
        dec = make_decoder()
        with torch.no_grad():
            for module in dec.modules():
                if isinstance(module, (torch.nn.Conv2d, torch.nn.Linear)):
                    module.weight.zero_()
            dec.head.bias.copy_(torch.tensor([0.1, -0.2, 0.3, 0.7]))
        rgb, alpha = dec.decode_slots(torch.randn(2, 2, 6))
        for c, value in enumerate([0.1, -0.2, 0.3]):
            assert torch.allclose(rgb[:, :, c], torch.full_like(rgb[:, :, c], value))
        assert torch.allclose(alpha, torch.full_like(alpha, 0.7))

    def test_distinct_latents_decode_differently(self):
        dec = make_decoder(seed=3)
        gen = torch.Generator().manual_seed(0)
        for _ in range(10):
            z = torch.randn(1, 2, 6, generator=gen)
            rgb, alpha = dec.decode_slots(z)
            assert not torch.equal(rgb[0, 0], rgb[0, 1])
        z = torch.randn(1, 1, 6, generator=gen)
        rgb, alpha = dec.decode_slots(torch.cat([z, z], dim=1))
        assert torch.equal(rgb[0, 0], rgb[0, 1])

    def test_latent_dim_mismatch_rejected(self):
        dec = make_decoder()
        with pytest.raises(ValueError):
            dec.decode_slots(torch.randn(1, 2, 9))

    def test_second_derivatives_exist(self):
        dec = make_decoder().double()
        z = torch.randn(1, 2, 6, dtype=torch.float64, requires_grad=True)
        recon = dec(z)
        (g,) = torch.autograd.grad(recon.image.square().sum(), z, create_graph=True)
        (gg,) = torch.autograd.grad(g.sum(), z)
        assert torch.isfinite(gg).all()


class TestCombineSlots:
    def test_single_slot_mask_is_one(self):
        rgb = torch.randn(2, 1, 3, 4, 5)
        logits = torch.randn(2, 1, 4, 5)
        recon = combine_slots(rgb, logits)
        assert torch.equal(recon.masks, torch.ones_like(recon.masks))
        assert torch.allclose(recon.image, rgb[:, 0])

    def test_equal_logits_give_uniform_masks(self):
        rgb = torch.randn(1, 4, 3, 6, 6)
        logits = torch.zeros(1, 4, 6, 6)
        recon = combine_slots(rgb, logits)
        assert torch.allclose(recon.masks, torch.full_like(recon.masks, 0.25))

    def test_masks_sum_to_one(self):
        gen = torch.Generator().manual_seed(1)
        rgb = torch.randn(3, 5, 3, 8, 8, generator=gen)
        logits = torch.randn(3, 5, 8, 8, generator=gen) * 4
        recon = combine_slots(rgb, logits)
        sums = recon.masks.sum(dim=1)
        assert (sums - 1).abs().max() <= 1e-6

    def test_image_is_mask_weighted_sum(self):
        gen = torch.Generator().manual_seed(2)
        rgb = torch.randn(2, 3, 3, 5, 5, generator=gen)
        logits = torch.randn(2, 3, 5, 5, generator=gen)
        recon = combine_slots(rgb, logits)
        manual = (recon.masks.unsqueeze(2) * rgb).sum(dim=1)
        assert torch.equal(recon.image, manual)

    def test_slot_permutation_equivariance(self):
        gen = torch.Generator().manual_seed(3)
        rgb = torch.randn(2, 4, 3, 6, 6, generator=gen)
        logits = torch.randn(2, 4, 6, 6, generator=gen)
        perm = torch.tensor([2, 0, 3, 1])
        base = combine_slots(rgb, logits)
        permuted = combine_slots(rgb[:, perm], logits[:, perm])
        assert torch.equal(permuted.slot_rgb, base.slot_rgb[:, perm])
        assert torch.allclose(permuted.masks, base.masks[:, perm], atol=1e-7)
        assert (permuted.image - base.image).abs().max() <= 1e-6

    def test_rejects_zero_slots(self):
        with pytest.raises(ValueError):
            combine_slots(torch.randn(1, 0, 3, 4, 4), torch.randn(1, 0, 4, 4))


def test_decoder_permutation_equivariance_through_forward():
    dec = make_decoder(seed=5)
    z = torch.randn(2, 4, 6)
    perm = torch.tensor([1, 3, 2, 0])
    base = dec(z)
    permuted = dec(z[:, perm])
    assert torch.allclose(permuted.slot_rgb, base.slot_rgb[:, perm], atol=1e-7)
    assert (permuted.image - base.image).abs().max() <= 1e-6
