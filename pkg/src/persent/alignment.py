"""Personality-sentiment alignment losses over projected CLS embeddings.

Sentiment and personality embeddings are mapped into a shared space by bare
linear projections. The contrastive loss treats same-index pairs as
positives against all in-batch candidates (denominator includes the
positive); the compound loss weights each anchor's term by its matched-pair
cosine, and the personalized constraint scales an L1 regression penalty by
(1 - cosine). All batch reductions are arithmetic means.

Cosine similarity uses exact norms: a zero-norm row raises instead of being
epsilon-masked, so representation collapse surfaces as an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class DegenerateEmbeddingError(ValueError):
    """An embedding row has exactly zero norm; cosine similarity is undefined."""


class AlignmentHead(nn.Module):
    """Projections into the shared alignment space plus the regression map.

    ``w_s``/``w_p`` are the bias-free linear maps for sentiment and
    personality embeddings, ``w_y`` regresses the projected sentiment
    embedding to the scalar label. ``tau`` is a fixed temperature.
    """

    def __init__(self, d_t: int, d_t_p: int, d_c: int, tau: float = 0.07, bias: bool = False):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.w_s = nn.Linear(d_t, d_c, bias=bias)
        self.w_p = nn.Linear(d_t_p, d_c, bias=bias)
        self.w_y = nn.Linear(d_c, 1, bias=bias)
        self.tau = tau


@dataclass
class AlignmentLosses:
    """Scalar loss tensors plus the full pairwise similarity matrix."""

    l_cl: torch.Tensor
    l_ccl: torch.Tensor
    l_ps: torch.Tensor
    l_align: torch.Tensor
    sims: torch.Tensor  # [N, N] cosine similarities, anchors on rows


def _checked_normalize(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateEmbeddingError(f"zero-norm row in {what}; cosine similarity undefined")
    return x / norms


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities, rows of ``a`` against rows of ``b``."""
    return _checked_normalize(a, "anchor embeddings") @ _checked_normalize(b, "candidate embeddings").T


def project(cls_s: torch.Tensor, cls_p: torch.Tensor, head: AlignmentHead) -> tuple[torch.Tensor, torch.Tensor]:
    return head.w_s(cls_s), head.w_p(cls_p)


def infonce(anchors: torch.Tensor, candidates: torch.Tensor, tau: float, symmetric: bool = False) -> torch.Tensor:
    """Temperature-scaled InfoNCE with in-batch negatives, mean over anchors."""
    if anchors.shape[0] < 2:
        raise ValueError("contrastive loss needs N >= 2 samples for negatives")
    logits = cosine_matrix(anchors, candidates) / tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss = F.cross_entropy(logits, targets)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.T, targets))
    return loss


def contrastive_loss(t_s: torch.Tensor, t_p: torch.Tensor, tau: float, symmetric: bool = False) -> torch.Tensor:
    return infonce(t_s, t_p, tau, symmetric=symmetric)


def compound_contrastive_loss(
    t_s: torch.Tensor,
    t_p: torch.Tensor,
    tau: float,
    symmetric: bool = False,
    clamp_sim: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor InfoNCE terms weighted by the matched-pair cosine.

    The weight keeps its sign by default, so the loss can go negative when a
    matched pair points away from its partner; ``clamp_sim`` restricts the
    weight to [0, 1].
    """
    if t_s.shape[0] < 2:
        raise ValueError("contrastive loss needs N >= 2 samples for negatives")
    sims = cosine_matrix(t_s, t_p)
    logits = sims / tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    per_anchor = F.cross_entropy(logits, targets, reduction="none")
    if symmetric:
        per_anchor = 0.5 * (per_anchor + F.cross_entropy(logits.T, targets, reduction="none"))
    diag = sims.diagonal()
    weight = diag.clamp(0.0, 1.0) if clamp_sim else diag
    return (weight * per_anchor).mean(), diag


def personalized_constraint_loss(
    t_s: torch.Tensor,
    t_p: torch.Tensor,
    labels: torch.Tensor,
    head: AlignmentHead,
) -> torch.Tensor:
    """(1 - matched cosine) weighted L1 error of the projected regression.

    The weight lives in [0, 2], so the loss is non-negative; a single sample
    is allowed since no negatives are involved.
    """
    diag = (_checked_normalize(t_s, "sentiment embeddings") * _checked_normalize(t_p, "personality embeddings")).sum(-1)
    preds = head.w_y(t_s).squeeze(-1)
    return ((1.0 - diag) * (preds - labels).abs()).mean()


def alignment_loss(
    t_s: torch.Tensor,
    t_p: torch.Tensor,
    labels: torch.Tensor,
    head: AlignmentHead,
    symmetric: bool = False,
    clamp_sim: bool = False,
) -> AlignmentLosses:
    """Full alignment objective; l_align is exactly l_ccl + l_ps."""
    if t_s.shape[0] < 2:
        raise ValueError("contrastive loss needs N >= 2 samples for negatives")
    sims = cosine_matrix(t_s, t_p)
    logits = sims / head.tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    per_anchor = F.cross_entropy(logits, targets, reduction="none")
    if symmetric:
        per_anchor = 0.5 * (per_anchor + F.cross_entropy(logits.T, targets, reduction="none"))
    l_cl = per_anchor.mean()
    diag = sims.diagonal()
    weight = diag.clamp(0.0, 1.0) if clamp_sim else diag
    l_ccl = (weight * per_anchor).mean()
    preds = head.w_y(t_s).squeeze(-1)
    l_ps = ((1.0 - diag) * (preds - labels).abs()).mean()
    l_align = l_ccl + l_ps
    return AlignmentLosses(l_cl=l_cl, l_ccl=l_ccl, l_ps=l_ps, l_align=l_align, sims=sims)
