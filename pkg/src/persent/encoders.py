"""Unimodal encoders: split transformer text stack, personality stack, LSTMs.

The sentiment text stack runs its first ``split_n`` layers as the shallow
text encoder and exposes the remaining layers as the multimodal pre-fusion
encoder (same parameters, sliced view). The personality stack is an
independent full-depth encoder, frozen by default. Visual/audio streams go
through single-layer unidirectional LSTMs with mask-aware state carry.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CLS_ID


class VocabularyError(ValueError):
    """A token id falls outside the configured vocabulary."""


class SequenceLengthError(ValueError):
    """A sequence exceeds the stack's maximum position count."""


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value widths.

    Masked key positions receive exactly zero weight (scores are set to -inf
    before the softmax), so padded content cannot leak into the output.
    """

    def __init__(self, d_model: int, n_heads: int, d_query: int | None = None, d_kv: int | None = None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"n_heads {n_heads} must divide d_model {d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_query or d_model, d_model)
        self.k_proj = nn.Linear(d_kv or d_model, d_model)
        self.v_proj = nn.Linear(d_kv or d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """query [B, Tq, dq]; key/value [B, Tk, dkv]; mask [B, Tk] True=valid.

        Returns (output [B, Tq, d_model], weights [B, heads, Tq, Tk]).
        """
        b, tq, _ = query.shape
        tk = key.shape[1]

        def split_heads(x):
            return x.view(b, -1, self.n_heads, self.head_dim).transpose(1, 2)

        q = split_heads(self.q_proj(query))
        k = split_heads(self.k_proj(key))
        v = split_heads(self.v_proj(value))

        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(~key_padding_mask.view(b, 1, 1, tk), float("-inf"))
        weights = F.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, tq, self.d_model)
        return self.out_proj(out), weights


class TransformerLayer(nn.Module):
    """Post-LN encoder layer: self-attention and GELU feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, x, key_padding_mask=mask)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ff2(F.gelu(self.ff1(x))))
        return x


class TextEncoderStack(nn.Module):
    """Token/position embeddings plus L transformer layers, split at N.

    Layers 1..N act as the shallow sentiment encoder; layers N+1..L double
    as the multimodal pre-fusion encoder. ``run_layers`` slices the same
    parameter list, so the split is a view, never a copy.
    """

    def __init__(
        self,
        vocab: int,
        d_model: int = 64,
        n_layers: int = 6,
        n_heads: int = 4,
        d_ff: int | None = None,
        max_positions: int = 64,
        split_n: int | None = None,
    ):
        super().__init__()
        if split_n is not None and not (1 <= split_n < n_layers):
            raise ValueError(f"split index {split_n} must satisfy 1 <= N < L={n_layers}")
        self.vocab = vocab
        self.d_model = d_model
        self.n_layers = n_layers
        self.max_positions = max_positions
        self.split_n = split_n
        self.token_emb = nn.Embedding(vocab, d_model)
        self.pos_emb = nn.Embedding(max_positions, d_model)
        self.emb_norm = nn.LayerNorm(d_model)
        self.layers = nn.ModuleList(
            TransformerLayer(d_model, n_heads, d_ff or 4 * d_model) for _ in range(n_layers)
        )

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] > self.max_positions:
            raise SequenceLengthError(
                f"sequence length {tokens.shape[1]} exceeds max positions {self.max_positions}"
            )
        if int(tokens.max()) >= self.vocab or int(tokens.min()) < 0:
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab}")
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.token_emb(tokens) + self.pos_emb(positions)
        return self.emb_norm(x)

    def run_layers(
        self, x: torch.Tensor, mask: torch.Tensor | None, lo: int, hi: int
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Apply layers lo..hi-1 (0-based); returns (states, per-layer CLS)."""
        cls_states = []
        for layer in self.layers[lo:hi]:
            x = layer(x, mask)
            cls_states.append(x[:, 0])
        return x, cls_states

    def encode_shallow(self, tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Shallow sentiment pass: CLS state after layer N plus CLS per layer 1..N."""
        if self.split_n is None:
            raise ValueError("stack has no split index configured")
        self._check_cls(tokens, mask)
        x = self.embed(tokens)
        _, cls_states = self.run_layers(x, mask, 0, self.split_n)
        return cls_states[-1], cls_states

    def encode_full(self, tokens: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Full-depth pass over all L layers."""
        self._check_cls(tokens, mask)
        x = self.embed(tokens)
        _, cls_states = self.run_layers(x, mask, 0, self.n_layers)
        return cls_states[-1], cls_states

    @staticmethod
    def _check_cls(tokens: torch.Tensor, mask: torch.Tensor) -> None:
        if not bool((tokens[:, 0] == CLS_ID).all()) or not bool(mask[:, 0].all()):
            raise ValueError(f"every sequence must start with the [CLS] id {CLS_ID}")


class PersonalityEncoder(nn.Module):
    """Independent full-depth text stack producing CLS_p; frozen by default."""

    def __init__(
        self,
        vocab: int,
        d_model: int = 64,
        n_layers: int = 6,
        n_heads: int = 4,
        max_positions: int = 64,
        trainable: bool = False,
    ):
        super().__init__()
        self.stack = TextEncoderStack(
            vocab, d_model=d_model, n_layers=n_layers, n_heads=n_heads, max_positions=max_positions
        )
        self.trainable = trainable
        if not trainable:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        cls_p, _ = self.stack.encode_full(tokens, mask)
        return cls_p


class SequenceEncoder(nn.Module):
    """Single-layer unidirectional LSTM over padded frames.

    Masked steps carry the previous hidden/cell state forward, so the state
    sequence is defined at every position and strictly causal.
    """

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.cell = nn.LSTMCell(d_in, d_hidden)

    def forward(self, feats: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feats [B, T, d_in], mask [B, T] True=valid -> (h [B, T, d_h], final [B, d_h])."""
        if feats.shape[-1] != self.d_in:
            raise ValueError(f"feature width {feats.shape[-1]} != configured input dim {self.d_in}")
        b, t, _ = feats.shape
        h = feats.new_zeros(b, self.d_hidden)
        c = feats.new_zeros(b, self.d_hidden)
        states = []
        for step in range(t):
            h_new, c_new = self.cell(feats[:, step], (h, c))
            keep = mask[:, step].unsqueeze(1).to(feats.dtype)
            h = keep * h_new + (1.0 - keep) * h
            c = keep * c_new + (1.0 - keep) * c
            states.append(h)
        return torch.stack(states, dim=1), h


def parameter_checksum(module: nn.Module) -> str:
    """Order-stable digest of all parameter bytes; bit-identical params match."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_flat_weights(module: nn.Module, path: str | Path) -> None:
    """Export parameters as JSON lines {"key": state-dict name, "value": nested arrays}."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, tensor in module.state_dict().items():
            fh.write(json.dumps({"key": key, "value": tensor.detach().cpu().tolist()}) + "\n")


def load_flat_weights(module: nn.Module, path: str | Path) -> None:
    """Import parameters written by :func:`save_flat_weights`; shapes must match."""
    state = module.state_dict()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            key = obj["key"]
            if key not in state:
                raise KeyError(f"unknown weight key {key!r}")
            value = torch.as_tensor(obj["value"], dtype=state[key].dtype)
            if value.shape != state[key].shape:
                raise ValueError(f"weight {key!r}: shape {tuple(value.shape)} != {tuple(state[key].shape)}")
            state[key] = value
    module.load_state_dict(state)
