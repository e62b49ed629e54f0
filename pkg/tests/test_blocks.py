import numpy as np
import pytest
import torch

from fdcheck import check_module_gradients, fd_gradient, probe_coords, relative_error
from oracles import dense_dual_scale_oracle
from kspi.blocks import (
    ChannelLayerNorm,
    ChannelSelfAttention,
    Downsample,
    FeedForward,
    HatBlock,
    SpatialSelfAttention,
    Upsample,
    avg_pool,
    shift_attention_mask,
    window_partition,
    window_reverse,
)

torch.manual_seed(0)


def zero_all(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestWindows:
    def test_group_arithmetic(self):
        x = torch.randn(1, 8, 32, 3)
        tokens = window_partition(x, 4, 16)
        assert tokens.shape == (4, 64, 3)

    @pytest.mark.parametrize("shift", [False, True])
    def test_reverse_is_inverse(self, shift):
        x = torch.randn(2, 8, 32, 5)
        tokens = window_partition(x, 4, 16, shift=shift)
        back = window_reverse(tokens, 4, 16, 8, 32, shift=shift)
        assert torch.equal(back, x)

    def test_window_too_large_rejected(self):
        with pytest.raises(ValueError, match="larger"):
            window_partition(torch.randn(1, 4, 4, 1), 8, 4)

    def test_non_multiple_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            window_partition(torch.randn(1, 6, 8, 1), 4, 4)

    def test_shift_mask_matches_brute_force(self):
        h, w, wh, ww = 8, 32, 4, 16
        sh, sw = wh // 2, ww // 2
        mask = shift_attention_mask(h, w, wh, ww, sh, sw)

        # Brute force from token origin coordinates: a pair is masked iff the
        # two tokens were on different sides of the wrap seam on either axis.
        coords = torch.zeros(1, h, w, 2)
        for r in range(h):
            for c in range(w):
                coords[0, r, c] = torch.tensor([(r + sh) % h, (c + sw) % w])
        tok = window_partition(coords, wh, ww)
        n_windows, n = tok.shape[0], tok.shape[1]

        expected = torch.zeros(n_windows, n, n, dtype=torch.bool)
        for g in range(n_windows):
            for i in range(n):
                for j in range(n):
                    wrap_i = (tok[g, i, 0] < sh, tok[g, i, 1] < sw)
                    wrap_j = (tok[g, j, 0] < sh, tok[g, j, 1] < sw)
                    expected[g, i, j] = wrap_i != wrap_j
        assert torch.equal(mask, expected)


class TestAvgPool:
    def test_two_by_two_mean(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
        assert avg_pool(x, 2).item() == pytest.approx(2.5)

    def test_constant_unchanged(self):
        x = torch.full((1, 3, 8, 8), 1.7)
        assert torch.allclose(avg_pool(x, 2), torch.full((1, 3, 4, 4), 1.7))

    def test_mean_preserved(self):
        x = torch.randn(2, 4, 8, 8)
        assert avg_pool(x, 2).mean().item() == pytest.approx(x.mean().item(), abs=1e-6)


class TestSpatialSelfAttention:
    def test_zero_projections_give_zero(self):
        attn = SpatialSelfAttention(8, window=(4, 16), pool=2)
        zero_all(attn)
        x = torch.randn(1, 8, 8, 32)
        assert torch.equal(attn(x), torch.zeros(1, 8, 8, 32))

    @pytest.mark.parametrize("shift", [False, True])
    def test_rows_sum_to_one(self, shift):
        attn = SpatialSelfAttention(8, window=(4, 16), pool=2, shift=shift)
        x = torch.randn(2, 8, 16, 32)
        _, maps = attn(x, return_attn=True)
        for branch in ("high", "low"):
            probs = maps[branch]
            sums = probs.sum(dim=-1)
            assert torch.all(probs >= 0)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_single_window_four_tokens_matches_dense(self):
        # One (1, 4) window, one head per branch, no pooling.
        attn = SpatialSelfAttention(4, window=(1, 4), pool=1, head_dim=16)
        x = torch.randn(1, 4, 1, 4)
        ours = attn(x).detach().numpy()
        ref = dense_dual_scale_oracle(x, attn)
        assert np.max(np.abs(ours - ref[None])) <= 1e-6

    def test_multi_window_pooled_matches_dense(self):
        attn = SpatialSelfAttention(8, window=(4, 16), pool=2, head_dim=2)
        x = torch.randn(1, 8, 8, 32)
        ours = attn(x).detach().numpy()
        ref = dense_dual_scale_oracle(x, attn)
        assert np.max(np.abs(ours - ref[None])) <= 1e-6

    @pytest.mark.parametrize("shape", [(8, 32), (10, 18), (16, 16), (4, 4)])
    def test_shape_preserved(self, shape):
        attn = SpatialSelfAttention(8, window=(4, 16), pool=2, shift=True)
        x = torch.randn(2, 8, *shape)
        assert attn(x).shape == x.shape

    def test_constant_field_unaffected_by_shift(self):
        plain = SpatialSelfAttention(8, window=(4, 16), pool=2, shift=False)
        shifted = SpatialSelfAttention(8, window=(4, 16), pool=2, shift=True)
        shifted.load_state_dict(plain.state_dict())
        x = torch.ones(1, 8, 16, 32) * 0.3
        assert torch.allclose(plain(x), shifted(x), atol=1e-6)

    def test_single_branch_modes(self):
        x = torch.randn(1, 8, 8, 32)
        for hf, lf in ((True, False), (False, True)):
            attn = SpatialSelfAttention(8, window=(4, 16), pool=2, hf=hf, lf=lf)
            assert attn(x).shape == x.shape
        with pytest.raises(ValueError):
            SpatialSelfAttention(8, hf=False, lf=False)


class TestChannelSelfAttention:
    def test_zero_weights_half_gate(self):
        csa = ChannelSelfAttention(8, beta=4)
        zero_all(csa)
        x = torch.randn(2, 8, 4, 4)
        assert torch.allclose(csa(x), 0.5 * x)

    def test_zero_input(self):
        csa = ChannelSelfAttention(8, beta=4)
        x = torch.zeros(1, 8, 4, 4)
        assert torch.equal(csa(x), x)

    def test_gate_strictly_in_unit_interval(self):
        csa = ChannelSelfAttention(16, beta=4)
        x = torch.randn(3, 16, 8, 8) * 10
        gate = torch.sigmoid(csa.fc2(torch.relu(csa.fc1(x.mean(dim=(2, 3))))))
        assert torch.all(gate > 0) and torch.all(gate < 1)

    def test_indivisible_beta_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            ChannelSelfAttention(8, beta=3)


class TestFeedForward:
    def test_zero_weights_zero_output(self):
        ffn = FeedForward(8)
        zero_all(ffn)
        x = torch.randn(1, 8, 6, 6)
        assert torch.equal(ffn(x), torch.zeros_like(x))

    def test_shape_preserved(self):
        ffn = FeedForward(8, expansion=2)
        x = torch.randn(2, 8, 10, 14)
        assert ffn(x).shape == x.shape

    def test_gelu_slope_near_zero(self):
        # d/dx GELU(x) at 0+ is ~0.5; probe with a central difference.
        x = torch.zeros(1, dtype=torch.float64, requires_grad=False)
        h = 1e-6
        slope = (torch.nn.functional.gelu(x + h) - torch.nn.functional.gelu(x - h)) / (2 * h)
        assert slope.item() == pytest.approx(0.5, rel=1e-4)


class TestHatBlock:
    def test_zero_weights_identity(self):
        block = HatBlock(8, window=(4, 16), pool=2, beta=4)
        zero_all(block)
        x = torch.randn(2, 8, 8, 32)
        assert torch.equal(block(x), x)

    def test_shape_preserved(self):
        block = HatBlock(8, window=(4, 16), pool=2, beta=4, shift=True)
        x = torch.randn(1, 8, 12, 20)
        assert block(x).shape == x.shape

    @pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-6), (torch.float32, 1e-3)])
    def test_gradients_match_finite_differences(self, dtype, tol):
        torch.manual_seed(1)
        block = HatBlock(8, window=(2, 4), pool=2, beta=4).to(dtype)
        x = torch.randn(1, 8, 8, 8, dtype=torch.float64)
        target = torch.randn(1, 8, 8, 8, dtype=torch.float64)

        def make_loss(m):
            mdtype = next(m.parameters()).dtype
            xm, tm = x.to(mdtype), target.to(mdtype)
            return lambda: ((m(xm) - tm) ** 2).mean()

        errors = check_module_gradients(block, make_loss, h=1e-6, max_probes_per_tensor=6, seed=2)
        worst = max(errors.values())
        assert worst < tol, f"worst group error {worst}: {errors}"

    @pytest.mark.parametrize("dtype,h,tol", [(torch.float64, 1e-6, 1e-6)])
    def test_input_gradient_matches_finite_differences(self, dtype, h, tol):
        torch.manual_seed(3)
        block = HatBlock(8, window=(2, 4), pool=2, beta=4).to(dtype)
        x = torch.randn(1, 8, 8, 8, dtype=dtype, requires_grad=True)
        target = torch.randn(1, 8, 8, 8, dtype=dtype)
        loss = ((block(x) - target) ** 2).mean()
        loss.backward()

        rng = np.random.default_rng(4)
        coords = probe_coords(x.numel(), 24, rng)
        analytic = x.grad.view(-1)[coords].numpy()

        def loss_eval():
            with torch.no_grad():
                return ((block(x) - target) ** 2).mean()

        numeric = fd_gradient(loss_eval, x, coords, h)
        assert relative_error(analytic, numeric) < tol


class TestResampling:
    def test_shapes(self):
        x = torch.randn(1, 8, 16, 16)
        down = Downsample(8)
        up = Upsample(8)
        assert down(x).shape == (1, 16, 8, 8)
        assert up(x).shape == (1, 4, 32, 32)

    def test_pixel_shuffle_layout(self):
        up = Upsample(2)
        with torch.no_grad():
            up.conv.weight.copy_(torch.eye(4, 2).view(4, 2, 1, 1) * 0)
            # Route input channel 0 to all four output blocks to read the layout.
            w = torch.zeros(4, 2, 1, 1)
            w[:, 0, 0, 0] = 1.0
            up.conv.weight.copy_(w)
            up.conv.bias.zero_()
        # Feed channel values [a, b, c, d] directly through pixel_shuffle.
        vals = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
        shuffled = torch.nn.functional.pixel_shuffle(vals, 2)
        assert torch.equal(shuffled.view(2, 2), torch.tensor([[1.0, 2.0], [3.0, 4.0]]))

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError, match="even"):
            Downsample(4)(torch.randn(1, 4, 7, 8))
        with pytest.raises(ValueError, match="even"):
            Upsample(5)

    def test_up_down_shape_roundtrip(self):
        x = torch.randn(1, 8, 16, 16)
        down = Downsample(8)
        up = Upsample(16)
        assert up(down(x)).shape == x.shape


class TestChannelLayerNorm:
    def test_normalizes_channels(self):
        norm = ChannelLayerNorm(8)
        x = torch.randn(2, 8, 4, 4) * 3 + 1
        y = norm(x)
        assert y.mean(dim=1).abs().max().item() < 1e-5
        assert (y.var(dim=1, unbiased=False) - 1).abs().max().item() < 1e-3
