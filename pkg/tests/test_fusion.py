import math

import pytest
import torch

from helpers import fd_check, token_batch
from persent.encoders import SequenceLengthError, TextEncoderStack
from persent.fusion import (
    EmptyAttentionError,
    FusionParams,
    crossmodal_attend,
    crossmodal_contrastive_loss,
    masked_mean_pool,
    parallel_fuse,
    predict,
    prefuse,
    serial_fuse,
)

ORTHO_PAIR_LOSS = math.log(1.0 + math.exp(-1.0))


def make_params(d_t=8, d_h=6, d_f=8, heads=2, dropout=0.0, seed=0):
    torch.manual_seed(seed)
    return FusionParams(d_t=d_t, d_h=d_h, d_f=d_f, n_heads=heads, dropout=dropout)


def identity_(linear):
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.weight.shape[0]))
        if linear.bias is not None:
            linear.bias.zero_()


class TestCrossmodalContrastiveLoss:
    def test_orthonormal_hand_value(self):
        cls_s = torch.eye(2, dtype=torch.float64)
        h = cls_s.unsqueeze(1)  # one valid frame per sample, pooled = cls_s
        mask = torch.ones(2, 1, dtype=torch.bool)
        loss = crossmodal_contrastive_loss(cls_s, h, h, mask, mask, tau=1.0)
        assert abs(loss.item() - 2.0 * ORTHO_PAIR_LOSS) < 1e-9

    def test_identical_candidates_give_two_log_n(self):
        n = 4
        torch.manual_seed(0)
        cls_s = torch.randn(n, 3, dtype=torch.float64)
        frame = torch.tensor([0.2, -1.0, 0.7], dtype=torch.float64)
        h = frame.expand(n, 2, 3).clone()
        mask = torch.ones(n, 2, dtype=torch.bool)
        loss = crossmodal_contrastive_loss(cls_s, h, h, mask, mask, tau=1.0)
        assert abs(loss.item() - 2.0 * math.log(n)) < 1e-12

    def test_scalar_output(self):
        cls_s = torch.eye(2)
        h = cls_s.unsqueeze(1)
        mask = torch.ones(2, 1, dtype=torch.bool)
        assert crossmodal_contrastive_loss(cls_s, h, h, mask, mask, tau=0.1).shape == ()

    def test_pooling_ignores_masked_frames(self):
        cls_s = torch.eye(2, dtype=torch.float64)
        h = torch.cat([cls_s.unsqueeze(1), torch.full((2, 1, 2), 99.0, dtype=torch.float64)], dim=1)
        mask = torch.tensor([[True, False], [True, False]])
        loss = crossmodal_contrastive_loss(cls_s, h, h, mask, mask, tau=1.0)
        assert abs(loss.item() - 2.0 * ORTHO_PAIR_LOSS) < 1e-9

    def test_empty_pool_rejected(self):
        with pytest.raises(EmptyAttentionError):
            masked_mean_pool(torch.randn(2, 3, 4), torch.zeros(2, 3, dtype=torch.bool))


class TestPrefuse:
    def build(self, seed=0, d_t=8, layers=4, split=2, d_h=6, max_pos=32):
        torch.manual_seed(seed)
        stack = TextEncoderStack(20, d_model=d_t, n_layers=layers, n_heads=2, max_positions=max_pos, split_n=split)
        params = FusionParams(d_t=d_t, d_h=d_h, d_f=8, n_heads=2, dropout=0.0)
        tokens, tmask = token_batch([[0, 2, 3], [0, 5, 6, 7]])
        cls_s, _ = stack.encode_shallow(tokens, tmask)
        h_v = torch.randn(2, 3, d_h)
        h_a = torch.randn(2, 2, d_h)
        mask_v = torch.ones(2, 3, dtype=torch.bool)
        mask_a = torch.ones(2, 2, dtype=torch.bool)
        return stack, params, cls_s, h_v, h_a, mask_v, mask_a

    def test_all_masked_equals_text_only_bitwise(self):
        stack, params, cls_s, h_v, h_a, mask_v, mask_a = self.build()
        cls_m, _ = prefuse(
            cls_s, h_v, h_a, torch.zeros_like(mask_v), torch.zeros_like(mask_a), stack, params
        )
        text_mask = torch.ones(2, 1, dtype=torch.bool)
        _, ref_cls = stack.run_layers(cls_s.unsqueeze(1), text_mask, stack.split_n, stack.n_layers)
        assert torch.equal(cls_m, ref_cls[-1])

    def test_valid_frame_perturbation_changes_output(self):
        stack, params, cls_s, h_v, h_a, mask_v, mask_a = self.build()
        cls_m, _ = prefuse(cls_s, h_v, h_a, mask_v, mask_a, stack, params)
        h_a2 = h_a.clone()
        h_a2[0, 1] += 1.0
        cls_m2, _ = prefuse(cls_s, h_v, h_a2, mask_v, mask_a, stack, params)
        assert (cls_m - cls_m2).norm().item() > 0.0

    def test_masked_frame_perturbation_is_inert(self):
        stack, params, cls_s, h_v, h_a, mask_v, mask_a = self.build()
        mask_v = torch.tensor([[True, True, False], [True, True, False]])
        cls_m, _ = prefuse(cls_s, h_v, h_a, mask_v, mask_a, stack, params)
        h_v2 = h_v.clone()
        h_v2[:, 2] += 5.0
        cls_m2, _ = prefuse(cls_s, h_v2, h_a, mask_v, mask_a, stack, params)
        assert torch.equal(cls_m, cls_m2)

    def test_shape_and_deep_cls_count(self):
        stack, params, cls_s, h_v, h_a, mask_v, mask_a = self.build(d_t=8, layers=4, split=2)
        cls_m, deep_cls = prefuse(cls_s, h_v, h_a, mask_v, mask_a, stack, params)
        assert cls_m.shape == (2, 8)
        assert len(deep_cls) == stack.n_layers - stack.split_n
        assert torch.equal(deep_cls[-1], cls_m)

    def test_sequence_length_guard(self):
        stack, params, cls_s, h_v, h_a, mask_v, mask_a = self.build(max_pos=4)
        h_v = torch.randn(2, 6, 6)
        mask_v = torch.ones(2, 6, dtype=torch.bool)
        with pytest.raises(SequenceLengthError):
            prefuse(cls_s, h_v, h_a, mask_v, mask_a, stack, params)


class TestCrossmodalAttend:
    def test_constant_values_collapse_to_value_projection(self):
        params = make_params(d_t=8, d_h=6, d_f=8)
        c = torch.randn(6)
        h_v = c.expand(3, 5, 6).clone()
        h_a = torch.randn(3, 4, 6)
        mask_v = torch.tensor([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 0, 0, 0]], dtype=torch.bool)
        mask_a = torch.ones(3, 4, dtype=torch.bool)
        out = crossmodal_attend(torch.randn(3, 8), h_v, h_a, mask_v, mask_a, params)
        expected = params.att_v.out_proj(params.att_v.v_proj(c))
        for row in out.v_t:
            assert torch.allclose(row, expected, atol=1e-5)

    def test_attention_rows_sum_to_one_over_valid(self):
        params = make_params()
        h_v = torch.randn(2, 5, 6)
        h_a = torch.randn(2, 3, 6)
        mask_v = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
        mask_a = torch.ones(2, 3, dtype=torch.bool)
        out = crossmodal_attend(torch.randn(2, 8), h_v, h_a, mask_v, mask_a, params)
        sums = out.weights_v.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert torch.all(out.weights_v[0, :, :, 3:] == 0)

    def test_hand_softmax_toy(self):
        # single head, d=2, identity projections, keys e1/e2, query e1:
        # weights = softmax([1, 0] / sqrt(2)) ~= [0.6698, 0.3302]
        torch.manual_seed(0)
        params = FusionParams(d_t=2, d_h=2, d_f=2, n_heads=1, dropout=0.0)
        for att in (params.att_v, params.att_a):
            for lin in (att.q_proj, att.k_proj, att.v_proj, att.out_proj):
                identity_(lin)
        identity_(params.m_s_map)
        cls_m = torch.tensor([[1.0, 0.0]])
        keys = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])
        mask = torch.ones(1, 2, dtype=torch.bool)
        out = crossmodal_attend(cls_m, keys, keys, mask, mask, params)
        w1 = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1.0)
        assert torch.allclose(out.weights_v[0, 0, 0], torch.tensor([w1, 1 - w1]), atol=1e-6)
        assert abs(w1 - 0.6698) < 1e-3
        assert torch.allclose(out.v_t[0], torch.tensor([w1, 1 - w1]), atol=1e-6)

    def test_fully_masked_modality_rejected(self):
        params = make_params()
        h_v = torch.randn(2, 3, 6)
        h_a = torch.randn(2, 3, 6)
        mask_v = torch.tensor([[1, 1, 1], [0, 0, 0]], dtype=torch.bool)
        mask_a = torch.ones(2, 3, dtype=torch.bool)
        with pytest.raises(EmptyAttentionError):
            crossmodal_attend(torch.randn(2, 8), h_v, h_a, mask_v, mask_a, params)


class TestSerialFuse:
    def test_zero_weight_zero_output_in_test_mode(self):
        params = make_params(d_f=8)
        with torch.no_grad():
            params.w_serial.weight.zero_()
        out = serial_fuse(torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 8), params, normalize=False)
        assert torch.equal(out, torch.zeros(3, 8))

    def test_shape(self):
        params = make_params(d_f=8)
        out = serial_fuse(torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 8), params)
        assert out.shape == (3, 8)

    def test_layernorm_row_statistics(self):
        params = make_params(d_f=64, d_t=8, d_h=6, heads=2)
        v, a, m = (10.0 * torch.randn(5, 64) for _ in range(3))
        out = serial_fuse(v, a, m, params)  # affine is identity at init
        means = out.mean(dim=-1)
        variances = out.var(dim=-1, unbiased=False)
        assert means.abs().max().item() < 1e-6
        assert (variances - 1.0).abs().max().item() < 1e-5


class TestParallelFuse:
    def test_zero_input_zero_bias(self):
        params = make_params(d_f=8)
        with torch.no_grad():
            params.conv.bias.zero_()
        out = parallel_fuse(torch.zeros(2, 8), torch.zeros(2, 8), torch.zeros(2, 8), params)
        assert torch.equal(out, torch.zeros(2, 8))

    def test_averaging_kernel_hand_values(self):
        params = make_params(d_f=4)
        with torch.no_grad():
            params.conv.weight.fill_(1.0 / 9.0)
            params.conv.bias.zero_()
        ones = torch.ones(2, 4)
        out = parallel_fuse(ones, ones, ones, params)
        expected = torch.tensor([2.0 / 3.0, 1.0, 1.0, 2.0 / 3.0]).expand(2, 4)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_shape(self):
        params = make_params(d_f=8)
        assert parallel_fuse(torch.randn(3, 8), torch.randn(3, 8), torch.randn(3, 8), params).shape == (3, 8)

    def test_min_width_guard(self):
        params = make_params(d_f=4, d_t=2, d_h=2, heads=1)
        with pytest.raises(ValueError):
            parallel_fuse(torch.randn(2, 2), torch.randn(2, 2), torch.randn(2, 2), params)


class TestPredict:
    def test_zero_weights_zero_output(self):
        params = make_params(d_f=8)
        with torch.no_grad():
            params.sub1.weight.zero_()
            params.sub1.bias.zero_()
            params.sub2.weight.zero_()
            params.sub2.bias.zero_()
        out = predict(torch.randn(3, 8), torch.randn(3, 8), params)
        assert torch.equal(out, torch.zeros(3))

    def test_shape(self):
        params = make_params(d_f=8)
        assert predict(torch.randn(5, 8), torch.randn(5, 8), params).shape == (5,)

    def test_subnet_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        params = make_params(d_f=4, d_t=4, d_h=4, heads=1).double()
        f_s = torch.randn(3, 4, dtype=torch.float64)
        f_p = torch.randn(3, 4, dtype=torch.float64)
        labels = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)

        def loss_fn():
            return (predict(f_s, f_p, params) - labels).abs().mean()

        fd_check(
            loss_fn,
            [params.sub1.weight, params.sub1.bias, params.sub2.weight, params.sub2.bias],
            names=["sub1.w", "sub1.b", "sub2.w", "sub2.b"],
        )
