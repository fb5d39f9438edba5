"""The assembled network: encoders, alignment head, and fusion stack.

One forward pass produces predictions plus every loss component; toggles
route around disabled parts so their parameters never enter the graph
(exactly zero gradient). The alignment anchor is selectable by layer index
k: 1..N pick shallow text CLS states, N+1..L pick the pre-fusion deep CLS
states, L+1 aligns against projected pooled visual+audio features, and L+2
against the pre-fusion output itself (which coincides with k = L in this
mapping). Without the pre-fusion encoder, anchors above N fall back to the
substituted CLS_m.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .alignment import AlignmentHead, AlignmentLosses, alignment_loss, project
from .config import RunConfig
from .data import Batch, Manifest
from .encoders import PersonalityEncoder, SequenceEncoder, TextEncoderStack
from .fusion import (
    FusionParams,
    FusionState,
    crossmodal_attend,
    crossmodal_contrastive_loss,
    masked_mean_pool,
    parallel_fuse,
    predict,
    prefuse,
    serial_fuse,
)


@dataclass
class LossTerms:
    """Scalar loss tensors; disabled terms are fresh zero tensors."""

    l_cl: torch.Tensor
    l_ccl: torch.Tensor
    l_ps: torch.Tensor
    l_align: torch.Tensor
    l_clm: torch.Tensor
    l_task: torch.Tensor
    total: torch.Tensor


@dataclass
class ModelOutput:
    preds: torch.Tensor
    losses: LossTerms
    fusion: FusionState
    cls_s: torch.Tensor
    shallow_cls: list[torch.Tensor]
    cls_p: torch.Tensor | None
    anchor: torch.Tensor | None
    alignment: AlignmentLosses | None


def batch_tensors(batch: Batch, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Copy a numpy batch into torch tensors of the requested float dtype."""
    return {
        "tokens": torch.tensor(np.asarray(batch.tokens), dtype=torch.int64),
        "token_mask": torch.tensor(np.asarray(batch.token_mask), dtype=torch.bool),
        "visual": torch.tensor(np.asarray(batch.visual), dtype=dtype),
        "visual_mask": torch.tensor(np.asarray(batch.visual_mask), dtype=torch.bool),
        "audio": torch.tensor(np.asarray(batch.audio), dtype=dtype),
        "audio_mask": torch.tensor(np.asarray(batch.audio_mask), dtype=torch.bool),
        "labels": torch.tensor(np.asarray(batch.labels), dtype=dtype),
    }


class MultimodalSentimentModel(nn.Module):
    """Personality-aligned multi-level fusion network over three modalities."""

    def __init__(self, config: RunConfig, manifest: Manifest):
        super().__init__()
        config = config.resolved()
        self.config = config
        self.manifest = manifest
        self.text_stack = TextEncoderStack(
            vocab=manifest.vocab,
            d_model=config.d_t,
            n_layers=config.layers,
            n_heads=config.heads,
            max_positions=config.max_positions,
            split_n=config.split_layer,
        )
        self.personality = PersonalityEncoder(
            vocab=manifest.vocab,
            d_model=config.d_t_p,
            n_layers=config.layers,
            n_heads=config.heads,
            max_positions=config.max_positions,
            trainable=config.personality_trainable,
        )
        self.visual_enc = SequenceEncoder(manifest.d_v, config.d_h)
        self.audio_enc = SequenceEncoder(manifest.d_a, config.d_h)
        self.align_head = AlignmentHead(d_t=config.d_t, d_t_p=config.d_t_p, d_c=config.d_c, tau=config.tau)
        self.fusion = FusionParams(
            d_t=config.d_t,
            d_h=config.d_h,
            d_f=config.d_f,
            n_heads=config.heads,
            activation=config.activation,
            dropout=config.dropout,
            pre_in_v=manifest.d_v if config.feed_raw_features else None,
            pre_in_a=manifest.d_a if config.feed_raw_features else None,
        )
        # anchor projection for the k = L+1 sweep position
        self.pooled_modality_proj = nn.Linear(2 * config.d_h, config.d_t, bias=False)

    def _select_anchor(
        self,
        shallow_cls: list[torch.Tensor],
        deep_cls: list[torch.Tensor],
        cls_m: torch.Tensor,
        h_v: torch.Tensor,
        h_a: torch.Tensor,
        mask_v: torch.Tensor,
        mask_a: torch.Tensor,
    ) -> torch.Tensor:
        k = self.config.alignment_layer
        n = self.config.split_layer
        if k <= n:
            return shallow_cls[k - 1]
        if k == self.config.layers + 1:
            pooled = torch.cat([masked_mean_pool(h_v, mask_v), masked_mean_pool(h_a, mask_a)], dim=-1)
            return self.pooled_modality_proj(pooled)
        if k <= self.config.layers and deep_cls:
            return deep_cls[k - n - 1]
        return cls_m  # k = L+2, or deep anchors without a pre-fusion encoder

    def forward(self, tensors: dict[str, torch.Tensor]) -> ModelOutput:
        cfg = self.config
        tokens, token_mask = tensors["tokens"], tensors["token_mask"]
        labels = tensors["labels"]

        cls_s, shallow_cls = self.text_stack.encode_shallow(tokens, token_mask)
        h_v, _ = self.visual_enc(tensors["visual"], tensors["visual_mask"])
        h_a, _ = self.audio_enc(tensors["audio"], tensors["audio_mask"])
        mask_v, mask_a = tensors["visual_mask"], tensors["audio_mask"]

        if cfg.use_prefusion:
            pre_v, pre_a = (tensors["visual"], tensors["audio"]) if cfg.feed_raw_features else (h_v, h_a)
            cls_m, deep_cls = prefuse(
                cls_s, pre_v, pre_a, mask_v, mask_a, self.text_stack, self.fusion,
                use_type_emb=cfg.use_modality_type_emb,
            )
        else:
            pooled = torch.cat(
                [cls_s, masked_mean_pool(h_v, mask_v), masked_mean_pool(h_a, mask_a)], dim=-1
            )
            cls_m = self.fusion.prefusion_bypass(pooled)
            deep_cls = []

        attend = crossmodal_attend(cls_m, h_v, h_a, mask_v, mask_a, self.fusion)
        if cfg.use_enhanced_fusion:
            f_serial = serial_fuse(attend.v_enh, attend.a_enh, attend.m_enh, self.fusion)
            f_parallel = parallel_fuse(attend.v_t, attend.a_t, attend.m_s, self.fusion)
            preds = predict(f_serial, f_parallel, self.fusion)
        else:
            f_serial = f_parallel = None
            preds = self.fusion.enhanced_bypass(
                torch.cat([attend.v_t, attend.a_t, attend.m_s], dim=-1)
            ).squeeze(-1)

        zero = preds.new_zeros(())
        cls_p = None
        anchor = None
        align = None
        l_cl = l_ccl = l_ps = zero
        if cfg.use_personality:
            cls_p = self.personality(tokens, token_mask)
            anchor = self._select_anchor(shallow_cls, deep_cls, cls_m, h_v, h_a, mask_v, mask_a)
            t_s, t_p = project(anchor, cls_p, self.align_head)
            align = alignment_loss(
                t_s, t_p, labels, self.align_head,
                symmetric=cfg.symmetric_contrastive, clamp_sim=cfg.clamp_ccl_sim,
            )
            l_cl = align.l_cl
            l_ccl = align.l_ccl
            l_ps = align.l_ps if cfg.use_align_ps else zero
        l_align = l_ccl + l_ps

        if cfg.use_clm:
            l_clm = crossmodal_contrastive_loss(
                cls_s, h_v, h_a, mask_v, mask_a, cfg.tau,
                proj_v=self.fusion.clm_proj_v, proj_a=self.fusion.clm_proj_a,
            )
        else:
            l_clm = zero

        l_task = (preds - labels).abs().mean()
        total = l_align + l_clm + l_task

        fusion_state = FusionState(
            cls_m=cls_m, attend=attend, f_serial=f_serial, f_parallel=f_parallel, preds=preds, deep_cls=deep_cls
        )
        losses = LossTerms(
            l_cl=l_cl, l_ccl=l_ccl, l_ps=l_ps, l_align=l_align, l_clm=l_clm, l_task=l_task, total=total
        )
        return ModelOutput(
            preds=preds,
            losses=losses,
            fusion=fusion_state,
            cls_s=cls_s,
            shallow_cls=shallow_cls,
            cls_p=cls_p,
            anchor=anchor,
            alignment=align,
        )

    def dedicated_parameters(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameter groups exercised only when their toggle is enabled."""
        deep = [
            (f"text_stack.layers.{i}.{n}", p)
            for i in range(self.config.split_layer, self.config.layers)
            for n, p in self.text_stack.layers[i].named_parameters()
        ]
        return {
            "use_personality": [
                ("align_head.w_s.weight", self.align_head.w_s.weight),
                ("align_head.w_p.weight", self.align_head.w_p.weight),
                ("align_head.w_y.weight", self.align_head.w_y.weight),
            ],
            "use_align_ps": [("align_head.w_y.weight", self.align_head.w_y.weight)],
            "use_clm": [
                ("fusion.clm_proj_v.weight", self.fusion.clm_proj_v.weight),
                ("fusion.clm_proj_v.bias", self.fusion.clm_proj_v.bias),
                ("fusion.clm_proj_a.weight", self.fusion.clm_proj_a.weight),
                ("fusion.clm_proj_a.bias", self.fusion.clm_proj_a.bias),
            ],
            "use_prefusion": deep
            + [
                ("fusion.proj_v.weight", self.fusion.proj_v.weight),
                ("fusion.proj_a.weight", self.fusion.proj_a.weight),
                ("fusion.type_emb", self.fusion.type_emb),
            ],
            "use_enhanced_fusion": [
                ("fusion.w_serial.weight", self.fusion.w_serial.weight),
                ("fusion.conv.weight", self.fusion.conv.weight),
                ("fusion.sub1.weight", self.fusion.sub1.weight),
                ("fusion.sub2.weight", self.fusion.sub2.weight),
            ],
        }


def build_model(config: RunConfig, manifest: Manifest) -> MultimodalSentimentModel:
    """Seeded construction so identical configs give identical parameters."""
    torch.manual_seed(config.seed)
    return MultimodalSentimentModel(config, manifest)
