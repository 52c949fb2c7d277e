"""Loss terms of the pre-training objective.

Every kernel evaluates in float64 and returns a 0-d float64 tensor, so logged
values satisfy the composition identities of :class:`LossReport` to rounding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ContractError


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.2
    alpha_c: float = 0.1
    beta_c: float = 0.05

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be > 0")
        if self.alpha_c < 0 or self.beta_c < 0:
            raise ContractError("contrastive weights must be >= 0")


@dataclass(frozen=True)
class ReconstructionConfig:
    alpha_r: float = 0.1
    mask_ratio: float = 0.25

    def __post_init__(self):
        if not 0 <= self.alpha_r <= 1:
            raise ContractError("alpha_r must lie in [0, 1]")
        if not 0 <= self.mask_ratio < 1:
            raise ContractError("mask_ratio must lie in [0, 1)")


def _check_unit(x: torch.Tensor, name: str, tol: float = 1e-4):
    if x.numel() == 0:
        return
    err = (x.norm(dim=-1) - 1).abs().max()
    if err > tol:
        raise ContractError(f"{name} must be unit-norm (max deviation {float(err):.3g})")


def info_nce(
    query: torch.Tensor, positive: torch.Tensor, negatives: Optional[torch.Tensor], temperature: float = 0.2
) -> torch.Tensor:
    """Mean over rows of ``-log(e^{q.k+/t} / (e^{q.k+/t} + sum_i e^{q.n_i/t}))``.

    ``query`` and ``positive`` are D or N x D; ``negatives`` is K x D (K may be 0).
    """
    q = query.double()
    k = positive.double()
    if q.dim() == 1:
        q, k = q[None], k[None]
    if q.shape != k.shape:
        raise ContractError(f"query {tuple(q.shape)} and positive {tuple(k.shape)} differ in shape")
    if q.shape[0] == 0:
        raise ContractError("info_nce needs at least one query")
    _check_unit(q, "query")
    _check_unit(k, "positive")
    pos = (q * k).sum(dim=1, keepdim=True) / temperature
    if negatives is None or negatives.numel() == 0:
        logits = pos
    else:
        n = negatives.double()
        if n.dim() != 2 or n.shape[1] != q.shape[1]:
            raise ContractError(f"negatives must be K x {q.shape[1]}, got {tuple(n.shape)}")
        _check_unit(n, "negatives")
        logits = torch.cat([pos, q @ n.T / temperature], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos[:, 0]).mean()


def hcl_loss(z, z_pos, negatives, temperature: float = 0.2) -> torch.Tensor:
    """Holistic (image-level) contrastive loss."""
    return info_nce(z, z_pos, negatives, temperature)


def lcl_loss(z_bb, z_bb_pos, proposal_negatives, temperature: float = 0.2) -> torch.Tensor:
    """Proposal-level contrastive loss, averaged over all proposals."""
    return info_nce(z_bb, z_bb_pos, proposal_negatives, temperature)


def hlcl_loss(l_hcl, l_lcl, alpha_c: float, beta_c: float):
    if alpha_c < 0 or beta_c < 0:
        raise ContractError("contrastive weights must be >= 0")
    return alpha_c * l_hcl + beta_c * l_lcl


def ar_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Pixel-wise mean squared reconstruction error."""
    if x.shape != x_hat.shape:
        raise ContractError(f"reconstruction shape {tuple(x_hat.shape)} != input shape {tuple(x.shape)}")
    return (x.double() - x_hat.double()).pow(2).mean()


def _spatial_pool(f: torch.Tensor) -> torch.Tensor:
    return f.mean(dim=(-2, -1)) if f.dim() == 4 else f


def sr_loss(stage_features_clean: Sequence[torch.Tensor], stage_features_masked: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over stages of the mean squared distance between spatially pooled features."""
    if len(stage_features_clean) != len(stage_features_masked):
        raise ContractError(
            f"stage count mismatch: {len(stage_features_clean)} clean vs {len(stage_features_masked)} masked"
        )
    if not stage_features_clean:
        raise ContractError("sr_loss needs at least one stage")
    total = None
    for p, (a, b) in enumerate(zip(stage_features_clean, stage_features_masked)):
        a, b = _spatial_pool(a).double(), _spatial_pool(b).double()
        if a.shape != b.shape:
            raise ContractError(f"stage {p}: pooled shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
        term = (a - b).pow(2).mean()
        total = term if total is None else total + term
    return total


def drc_loss(l_ar, l_sr, alpha_r: float):
    if not 0 <= alpha_r <= 1:
        raise ContractError("alpha_r must lie in [0, 1]")
    return alpha_r * l_ar + (1 - alpha_r) * l_sr


def det_loss(
    pos_logits: torch.Tensor,
    pos_deltas: torch.Tensor,
    neg_logits: Optional[torch.Tensor] = None,
    target_deltas: Optional[torch.Tensor] = None,
    beta: float = 1.0,
) -> torch.Tensor:
    """Objectness BCE (proposals positive, background boxes negative) plus
    smooth-L1 of the proposal deltas against ``target_deltas`` (zero by default).

    With no negatives the objectness term uses positives only.
    """
    pos_logits = pos_logits.double().reshape(-1)
    pos_deltas = pos_deltas.double().reshape(-1, 4)
    if pos_deltas.shape[0] != pos_logits.shape[0]:
        raise ContractError("logits and deltas must be aligned per box")
    if neg_logits is None:
        neg_logits = pos_logits.new_zeros((0,))
    neg_logits = neg_logits.double().reshape(-1)
    logits = torch.cat([pos_logits, neg_logits])
    if logits.numel() == 0:
        raise ContractError("det_loss needs at least one box")
    labels = torch.cat([torch.ones_like(pos_logits), torch.zeros_like(neg_logits)])
    objectness = F.binary_cross_entropy_with_logits(logits, labels)
    if pos_deltas.shape[0] == 0:
        return objectness
    target = torch.zeros_like(pos_deltas) if target_deltas is None else target_deltas.double().reshape(-1, 4)
    return objectness + F.smooth_l1_loss(pos_deltas, target, beta=beta)


@dataclass(frozen=True)
class LossReport:
    l_hcl: float
    l_lcl: float
    l_hlcl: float
    l_ar: float
    l_sr: float
    l_drc: float
    l_det: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def compose(l_hcl, l_lcl, l_ar, l_sr, l_det, contrastive: ContrastiveConfig, recon: ReconstructionConfig):
    """Combine the five base terms; returns ``(l_hlcl, l_drc, total)`` in the
    input type (floats or tensors)."""
    l_hlcl = hlcl_loss(l_hcl, l_lcl, contrastive.alpha_c, contrastive.beta_c)
    l_drc = drc_loss(l_ar, l_sr, recon.alpha_r)
    return l_hlcl, l_drc, l_hlcl + l_drc + l_det


def total_loss(
    l_hcl=0.0,
    l_lcl=0.0,
    l_ar=0.0,
    l_sr=0.0,
    l_det=0.0,
    contrastive: ContrastiveConfig = ContrastiveConfig(),
    recon: ReconstructionConfig = ReconstructionConfig(),
) -> LossReport:
    vals = [float(v) for v in (l_hcl, l_lcl, l_ar, l_sr, l_det)]
    l_hlcl, l_drc, total = compose(*vals, contrastive, recon)
    return LossReport(vals[0], vals[1], l_hlcl, vals[2], vals[3], l_drc, vals[4], total)
