import pytest
import torch

from helpers import fd_check, token_batch
from persent.encoders import (
    MultiHeadAttention,
    PersonalityEncoder,
    SequenceEncoder,
    SequenceLengthError,
    TextEncoderStack,
    VocabularyError,
    load_flat_weights,
    parameter_checksum,
    save_flat_weights,
)


def small_stack(seed=0, vocab=20, d=16, layers=4, heads=2, split=2, max_pos=16):
    torch.manual_seed(seed)
    return TextEncoderStack(vocab, d_model=d, n_layers=layers, n_heads=heads, max_positions=max_pos, split_n=split)


class TestTextStack:
    def test_identical_rows_identical_cls(self):
        stack = small_stack()
        tokens, mask = token_batch([[0, 2, 3, 4], [0, 2, 3, 4]])
        cls_s, _ = stack.encode_shallow(tokens, mask)
        assert torch.equal(cls_s[0], cls_s[1])

    def test_shape_contract(self):
        stack = small_stack(d=16)
        tokens, mask = token_batch([[0, 2, 3], [0, 5, 6, 7]])
        cls_s, per_layer = stack.encode_shallow(tokens, mask)
        assert cls_s.shape == (2, 16)
        assert len(per_layer) == stack.split_n
        assert all(c.shape == (2, 16) for c in per_layer)

    def test_padded_positions_inert(self):
        stack = small_stack()
        tokens, mask = token_batch([[0, 2, 3], [0, 5, 6, 7, 8]])
        cls_a, _ = stack.encode_shallow(tokens, mask)
        perturbed = tokens.clone()
        perturbed[0, 4] = 9  # padded slot of the first row
        cls_b, _ = stack.encode_shallow(perturbed, mask)
        assert torch.equal(cls_a, cls_b)

    def test_batch_order_equivariance(self):
        stack = small_stack()
        tokens, mask = token_batch([[0, 2, 3], [0, 5, 6, 7], [0, 9]])
        cls_a, _ = stack.encode_shallow(tokens, mask)
        perm = torch.tensor([2, 0, 1])
        cls_b, _ = stack.encode_shallow(tokens[perm], mask[perm])
        assert torch.allclose(cls_a[perm], cls_b, atol=1e-6, rtol=0)

    def test_split_is_a_view_of_full_pass(self):
        stack = small_stack(layers=4, split=2)
        tokens, mask = token_batch([[0, 2, 3, 4], [0, 5, 6, 7]])
        x = stack.embed(tokens)
        full, cls_full = stack.run_layers(x, mask, 0, stack.n_layers)
        x2 = stack.embed(tokens)
        mid, cls_lo = stack.run_layers(x2, mask, 0, stack.split_n)
        end, cls_hi = stack.run_layers(mid, mask, stack.split_n, stack.n_layers)
        assert torch.equal(full, end)
        assert torch.equal(cls_full[-1], cls_hi[-1])

    def test_vocabulary_error(self):
        stack = small_stack(vocab=10)
        tokens, mask = token_batch([[0, 11]])
        with pytest.raises(VocabularyError):
            stack.encode_shallow(tokens, mask)

    def test_sequence_length_error(self):
        stack = small_stack(max_pos=4)
        tokens, mask = token_batch([[0, 2, 3, 4, 5]])
        with pytest.raises(SequenceLengthError):
            stack.encode_shallow(tokens, mask)

    def test_first_token_must_be_cls(self):
        stack = small_stack()
        tokens, mask = token_batch([[2, 3]])
        with pytest.raises(ValueError):
            stack.encode_shallow(tokens, mask)

    def test_invalid_split_index(self):
        with pytest.raises(ValueError):
            TextEncoderStack(10, n_layers=3, split_n=3)


class TestPersonalityEncoder:
    def test_frozen_parameters_never_update(self):
        torch.manual_seed(1)
        enc = PersonalityEncoder(vocab=20, d_model=16, n_layers=2, n_heads=2)
        before = parameter_checksum(enc)
        tokens, mask = token_batch([[0, 2, 3], [0, 4, 5]])
        out = enc(tokens, mask)
        assert not out.requires_grad
        trainable = [p for p in enc.parameters() if p.requires_grad]
        assert trainable == []
        assert parameter_checksum(enc) == before

    def test_shape(self):
        torch.manual_seed(1)
        enc = PersonalityEncoder(vocab=20, d_model=24, n_layers=2, n_heads=2)
        tokens, mask = token_batch([[0, 2], [0, 3], [0, 4]])
        assert enc(tokens, mask).shape == (3, 24)

    def test_distinct_texts_distinct_embeddings(self):
        torch.manual_seed(7)
        enc = PersonalityEncoder(vocab=20, d_model=16, n_layers=2, n_heads=2)
        tokens, mask = token_batch([[0, 2, 3], [0, 9, 10]])
        out = enc(tokens, mask)
        assert not torch.equal(out[0], out[1])

    def test_unfrozen_flag(self):
        enc = PersonalityEncoder(vocab=20, d_model=16, n_layers=2, n_heads=2, trainable=True)
        assert all(p.requires_grad for p in enc.parameters())


class TestSequenceEncoder:
    def test_zero_input_zero_bias_fixed_point(self):
        torch.manual_seed(0)
        enc = SequenceEncoder(5, 8)
        with torch.no_grad():
            enc.cell.bias_ih.zero_()
            enc.cell.bias_hh.zero_()
        feats = torch.zeros(2, 6, 5)
        mask = torch.ones(2, 6, dtype=torch.bool)
        states, final = enc(feats, mask)
        assert torch.equal(states, torch.zeros(2, 6, 8))
        assert torch.equal(final, torch.zeros(2, 8))

    def test_causality(self):
        torch.manual_seed(0)
        enc = SequenceEncoder(3, 4)
        feats = torch.randn(1, 8, 3)
        mask = torch.ones(1, 8, dtype=torch.bool)
        states_a, _ = enc(feats, mask)
        feats_b = feats.clone()
        feats_b[0, 5] += 1.0
        states_b, _ = enc(feats_b, mask)
        assert torch.equal(states_a[0, :5], states_b[0, :5])
        assert not torch.equal(states_a[0, 5:], states_b[0, 5:])

    def test_shape(self):
        enc = SequenceEncoder(3, 7)
        states, final = enc(torch.randn(4, 5, 3), torch.ones(4, 5, dtype=torch.bool))
        assert states.shape == (4, 5, 7)
        assert final.shape == (4, 7)

    def test_masked_steps_carry_state(self):
        torch.manual_seed(0)
        enc = SequenceEncoder(3, 4)
        feats = torch.randn(1, 6, 3)
        mask = torch.tensor([[True, True, True, False, False, False]])
        states, final = enc(feats, mask)
        assert torch.equal(states[0, 3], states[0, 2])
        assert torch.equal(states[0, 5], states[0, 2])
        assert torch.equal(final, states[:, 2])

    def test_dimension_mismatch(self):
        enc = SequenceEncoder(3, 4)
        with pytest.raises(ValueError):
            enc(torch.randn(1, 5, 7), torch.ones(1, 5, dtype=torch.bool))


class TestAttention:
    def test_weights_rows_sum_to_one(self):
        torch.manual_seed(0)
        attn = MultiHeadAttention(8, 2)
        q = torch.randn(3, 2, 8)
        kv = torch.randn(3, 5, 8)
        mask = torch.tensor([[1, 1, 1, 0, 0]] * 3, dtype=torch.bool)
        _, weights = attn(q, kv, kv, key_padding_mask=mask)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert torch.all(weights[..., 3:] == 0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(10, 3)


class TestGradients:
    def test_text_stack_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        stack = small_stack(vocab=12, d=8, layers=2, heads=2, split=1, max_pos=8).double()
        tokens, mask = token_batch([[0, 2, 3], [0, 5, 6, 7]])
        probe = torch.randn(2, 8, dtype=torch.float64)

        def loss_fn():
            cls_full, per_layer = stack.encode_full(tokens, mask)
            return (cls_full * probe).sum() + per_layer[0].pow(2).sum()

        params = dict(stack.named_parameters())
        fd_check(loss_fn, list(params.values()), names=list(params.keys()))

    def test_sequence_encoder_gradients_match_finite_differences(self):
        torch.manual_seed(4)
        enc = SequenceEncoder(3, 4).double()
        feats = torch.randn(2, 5, 3, dtype=torch.float64)
        mask = torch.tensor([[1, 1, 1, 1, 0], [1, 1, 0, 0, 0]], dtype=torch.bool)
        probe = torch.randn(2, 4, dtype=torch.float64)

        def loss_fn():
            states, final = enc(feats, mask)
            return (final * probe).sum() + states.pow(2).sum()

        params = dict(enc.named_parameters())
        fd_check(loss_fn, list(params.values()), names=list(params.keys()))


class TestWeightIO:
    def test_flat_weight_roundtrip(self, tmp_path):
        a = small_stack(seed=1, d=8, layers=2, heads=2, split=1)
        b = small_stack(seed=2, d=8, layers=2, heads=2, split=1)
        assert parameter_checksum(a) != parameter_checksum(b)
        path = tmp_path / "weights.jsonl"
        save_flat_weights(a, path)
        load_flat_weights(b, path)
        assert parameter_checksum(a) == parameter_checksum(b)

    def test_shape_mismatch_rejected(self, tmp_path):
        a = small_stack(seed=1, d=8, layers=2, heads=2, split=1)
        b = small_stack(seed=2, d=16, layers=2, heads=2, split=1)
        path = tmp_path / "weights.jsonl"
        save_flat_weights(a, path)
        with pytest.raises(ValueError):
            load_flat_weights(b, path)
