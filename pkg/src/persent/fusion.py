"""Multimodal fusion: pre-fusion, cross-modal attention, enhanced fusion.

Pre-fusion appends projected visual/audio states to the sentiment CLS token
and runs the deep slice of the text stack over the combined sequence. The
pre-fusion output then queries each modality's temporal states through
multi-head attention (bare attention, no residual sublayers; the enhancement
maps do the post-processing). Enhanced fusion combines a serial stream
(linear over concatenated enhanced features, layer-normalized) with a
parallel stream (kernel-3 convolution over the three feature rows stacked as
channels), and a two-layer subnet maps both to the scalar prediction.

Fully masked modality segments are dropped from the pre-fusion sequence, so
an all-masked batch reduces exactly to the text-only deep forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import infonce
from .encoders import MultiHeadAttention, SequenceLengthError, TextEncoderStack


class EmptyAttentionError(ValueError):
    """Every position of a modality is masked; attention has nothing to read."""


_ACTIVATIONS = {"gelu": F.gelu, "relu": F.relu, "tanh": torch.tanh}


class FusionParams(nn.Module):
    """All learnable pieces of the fusion stack.

    Includes the two ablation substitutes (``prefusion_bypass``,
    ``enhanced_bypass``) so parameters exist regardless of toggles and
    receive exactly zero gradient when their path is disabled.
    """

    def __init__(
        self,
        d_t: int,
        d_h: int,
        d_f: int,
        n_heads: int = 4,
        activation: str = "gelu",
        dropout: float = 0.1,
        pre_in_v: int | None = None,
        pre_in_a: int | None = None,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(_ACTIVATIONS)}")
        self.activation = activation
        # modality-to-text projections feeding pre-fusion tokens; input width
        # differs from d_h only when raw frames bypass the LSTMs
        self.proj_v = nn.Linear(pre_in_v or d_h, d_t)
        self.proj_a = nn.Linear(pre_in_a or d_h, d_t)
        self.type_emb = nn.Parameter(torch.zeros(2, d_t))
        # dedicated projections for the cross-modal contrastive loss
        self.clm_proj_v = nn.Linear(d_h, d_t)
        self.clm_proj_a = nn.Linear(d_h, d_t)
        # cross-modal interaction
        self.m_s_map = nn.Linear(d_t, d_f)
        self.att_v = MultiHeadAttention(d_f, n_heads, d_query=d_f, d_kv=d_h)
        self.att_a = MultiHeadAttention(d_f, n_heads, d_query=d_f, d_kv=d_h)
        self.enhance_v = nn.Linear(d_f, d_f)
        self.enhance_a = nn.Linear(d_f, d_f)
        self.enhance_m = nn.Linear(d_f, d_f)
        # enhanced fusion
        self.w_serial = nn.Linear(3 * d_f, d_f, bias=False)
        self.serial_norm = nn.LayerNorm(d_f)
        self.conv = nn.Conv1d(3, 1, kernel_size=3, stride=1, padding=1)
        self.sub1 = nn.Linear(2 * d_f, d_f)
        self.sub2 = nn.Linear(d_f, 1)
        self.drop = nn.Dropout(dropout)
        # ablation substitutes
        self.prefusion_bypass = nn.Linear(d_t + 2 * d_h, d_t)
        self.enhanced_bypass = nn.Linear(3 * d_f, 1)

    def act(self, x: torch.Tensor) -> torch.Tensor:
        return _ACTIVATIONS[self.activation](x)


@dataclass
class AttendResult:
    """Cross-modal interaction outputs: attended and enhanced features."""

    m_s: torch.Tensor  # [N, d_f]
    v_t: torch.Tensor  # [N, d_f]
    a_t: torch.Tensor  # [N, d_f]
    v_enh: torch.Tensor  # [N, d_f]
    a_enh: torch.Tensor  # [N, d_f]
    m_enh: torch.Tensor  # [N, d_f]
    weights_v: torch.Tensor  # [N, heads, 1, T_v]
    weights_a: torch.Tensor  # [N, heads, 1, T_a]


@dataclass
class FusionState:
    """Intermediate fusion artifacts for one batch.

    The serial/parallel streams are None when the enhanced-fusion bypass
    head produced the predictions instead.
    """

    cls_m: torch.Tensor  # [N, d_t]
    attend: AttendResult
    f_serial: torch.Tensor | None  # [N, d_f]
    f_parallel: torch.Tensor | None  # [N, d_f]
    preds: torch.Tensor  # [N]
    deep_cls: list[torch.Tensor] = field(default_factory=list)


def masked_mean_pool(states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid positions only; a row with no valid position is an error."""
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyAttentionError("a sample has no valid positions to pool")
    summed = (states * mask.unsqueeze(-1).to(states.dtype)).sum(dim=1)
    return summed / counts.unsqueeze(-1).to(states.dtype)


def crossmodal_contrastive_loss(
    cls_s: torch.Tensor,
    h_v: torch.Tensor,
    h_a: torch.Tensor,
    mask_v: torch.Tensor,
    mask_a: torch.Tensor,
    tau: float,
    proj_v: nn.Module | None = None,
    proj_a: nn.Module | None = None,
) -> torch.Tensor:
    """Text-anchored InfoNCE against each modality's pooled states, summed.

    Pooling resolves the sequence-vs-vector mismatch; the optional
    projections map pooled states into the text width before the cosine.
    """
    loss = cls_s.new_zeros(())
    for h_m, mask, proj in ((h_v, mask_v, proj_v), (h_a, mask_a, proj_a)):
        pooled = masked_mean_pool(h_m, mask)
        if proj is not None:
            pooled = proj(pooled)
        loss = loss + infonce(cls_s, pooled, tau)
    return loss


def prefuse(
    cls_s: torch.Tensor,
    h_v: torch.Tensor,
    h_a: torch.Tensor,
    mask_v: torch.Tensor,
    mask_a: torch.Tensor,
    stack: TextEncoderStack,
    params: FusionParams,
    use_type_emb: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Run [CLS_s] ++ P_v(h_v) ++ P_a(h_a) through the deep stack slice.

    Returns the position-0 output after the last layer (CLS_m) plus the
    per-deep-layer CLS states for the layer sweep. A modality segment that
    is masked at every position of the batch is dropped outright, which
    keeps the all-masked case bit-identical to the text-only deep forward.
    """
    if stack.split_n is None:
        raise ValueError("stack has no split index configured")
    pieces = [cls_s.unsqueeze(1)]
    masks = [torch.ones(cls_s.shape[0], 1, dtype=torch.bool, device=cls_s.device)]
    for idx, (h_m, mask, proj) in enumerate(((h_v, mask_v, params.proj_v), (h_a, mask_a, params.proj_a))):
        if not bool(mask.any()):
            continue
        tokens = proj(h_m)
        if use_type_emb:
            tokens = tokens + params.type_emb[idx]
        pieces.append(tokens)
        masks.append(mask)
    x = torch.cat(pieces, dim=1)
    if x.shape[1] > stack.max_positions:
        raise SequenceLengthError(
            f"pre-fusion sequence length {x.shape[1]} exceeds max positions {stack.max_positions}"
        )
    combined_mask = torch.cat(masks, dim=1)
    _, deep_cls = stack.run_layers(x, combined_mask, stack.split_n, stack.n_layers)
    return deep_cls[-1], deep_cls


def crossmodal_attend(
    cls_m: torch.Tensor,
    h_v: torch.Tensor,
    h_a: torch.Tensor,
    mask_v: torch.Tensor,
    mask_a: torch.Tensor,
    params: FusionParams,
) -> AttendResult:
    """Query both modalities with the pre-fusion features (bare attention)."""
    for name, mask in (("visual", mask_v), ("audio", mask_a)):
        if bool((~mask).all(dim=1).any()):
            raise EmptyAttentionError(f"all {name} positions masked for at least one sample")
    m_s = params.m_s_map(cls_m)
    query = m_s.unsqueeze(1)
    v_t, w_v = params.att_v(query, h_v, h_v, key_padding_mask=mask_v)
    a_t, w_a = params.att_a(query, h_a, h_a, key_padding_mask=mask_a)
    v_t = v_t.squeeze(1)
    a_t = a_t.squeeze(1)
    return AttendResult(
        m_s=m_s,
        v_t=v_t,
        a_t=a_t,
        v_enh=params.enhance_v(v_t),
        a_enh=params.enhance_a(a_t),
        m_enh=params.enhance_m(m_s),
        weights_v=w_v,
        weights_a=w_a,
    )


def serial_fuse(
    v_enh: torch.Tensor,
    a_enh: torch.Tensor,
    m_enh: torch.Tensor,
    params: FusionParams,
    normalize: bool = True,
) -> torch.Tensor:
    """Linear map over the concatenated enhanced features, layer-normalized."""
    fused = params.w_serial(torch.cat([v_enh, a_enh, m_enh], dim=-1))
    return params.serial_norm(fused) if normalize else fused


def parallel_fuse(v_t: torch.Tensor, a_t: torch.Tensor, m_s: torch.Tensor, params: FusionParams) -> torch.Tensor:
    """Kernel-3 convolution along the feature axis, modalities as channels."""
    if v_t.shape[-1] < 3:
        raise ValueError(f"feature width {v_t.shape[-1]} too small for the kernel-3 convolution")
    stacked = torch.stack([v_t, a_t, m_s], dim=1)  # [N, 3, d_f]
    return params.conv(stacked).squeeze(1)


def predict(f_serial: torch.Tensor, f_parallel: torch.Tensor, params: FusionParams) -> torch.Tensor:
    """Two-layer subnet over the joined fusion streams; unclamped scalar output."""
    hidden = params.drop(params.act(params.sub1(torch.cat([f_serial, f_parallel], dim=-1))))
    return params.sub2(hidden).squeeze(-1)
