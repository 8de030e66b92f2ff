"""Training objective: OHEM dice on regions, dice on kernels, aggregation and
discrimination losses on the similarity vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .labelgen import SegTargets
from .model import SegOutput

DICE_EPS = 1e-6


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.25
    delta_agg: float = 0.5
    delta_dis: float = 3.0
    ohem_ratio: float = 3.0
    shrink_ratio: float = 0.4
    loss_mode: str = "pan"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 < self.delta_agg < self.delta_dis:
            raise ValueError("need 0 < delta_agg < delta_dis")
        if self.loss_mode not in ("pan", "ce_dice"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")


@dataclass
class LossReport:
    total: torch.Tensor
    region: torch.Tensor
    kernel: torch.Tensor
    agg: torch.Tensor
    dis: torch.Tensor
    ohem_mask_coverage: float

    def as_dict(self) -> dict:
        d = {k: float(getattr(self, k).detach()) for k in ("total", "region", "kernel", "agg", "dis")}
        d["ohem_mask_coverage"] = float(self.ohem_mask_coverage)
        return d


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """``1 - 2 sum(p g) / (sum(p^2) + sum(g^2))`` over the last two dims."""
    if pred.shape != gt.shape or (valid is not None and valid.shape != pred.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(pred.dtype)
    if valid is not None:
        valid = valid.to(pred.dtype)
        pred, gt = pred * valid, gt * valid
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = (pred * pred).sum(dim=(-2, -1)) + (gt * gt).sum(dim=(-2, -1))
    return 1 - (2 * inter + DICE_EPS) / (denom + DICE_EPS)


@torch.no_grad()
def ohem_select(score: torch.Tensor, gt: torch.Tensor, ratio: float = 3.0) -> torch.Tensor:
    """All positives plus the ``ratio * n_pos`` highest-scoring negatives.

    Works on a single (H, W) map or a batch (B, H, W). Without positives the
    hardest 1% of negatives are kept.
    """
    if score.dim() == 3:
        return torch.stack([ohem_select(s, g, ratio) for s, g in zip(score, gt)])
    pos = gt > 0.5
    n_pos = int(pos.sum())
    neg_scores = score[~pos]
    if n_pos == 0:
        n_neg = max(1, math.ceil(0.01 * score.numel()))
    else:
        n_neg = int(min(ratio * n_pos, neg_scores.numel()))
    keep = pos.clone()
    if n_neg > 0 and neg_scores.numel():
        idx = torch.topk(neg_scores, n_neg, sorted=False).indices
        neg_flat = torch.nonzero((~pos).flatten(), as_tuple=True)[0]
        keep.view(-1)[neg_flat[idx]] = True
    return keep


def _masks(targets: SegTargets, device) -> tuple[torch.Tensor, torch.Tensor]:
    reg = torch.as_tensor(np.stack(targets.per_instance_region) if len(targets) else
                          np.zeros((0, *targets.shape), bool), device=device)
    ker = torch.as_tensor(np.stack(targets.per_instance_kernel) if len(targets) else
                          np.zeros((0, *targets.shape), bool), device=device)
    return reg, ker


def kernel_centroids(similarity: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Mean similarity vector (N, 4) of each kernel mask in ``kernels`` (N, H, W)."""
    w = kernels.to(similarity.dtype)
    return torch.einsum("nhw,chw->nc", w, similarity) / w.sum(dim=(1, 2)).clamp(min=1)[:, None]


def agg_loss(similarity: torch.Tensor, targets: SegTargets, delta: float = 0.5) -> torch.Tensor:
    """Pull ring pixels of each instance towards its kernel centroid.

    ``similarity`` is a single (4, H, W) map.
    """
    n = len(targets)
    if n == 0:
        return similarity.sum() * 0
    regions, kernels = _masks(targets, similarity.device)
    centroids = kernel_centroids(similarity, kernels)
    total = similarity.new_zeros(())
    for i in range(n):
        ring = regions[i] & ~kernels[i]
        if not ring.any():
            continue
        feats = similarity[:, ring]                          # (4, |T_i|)
        dist = torch.linalg.vector_norm(feats - centroids[i][:, None], dim=0)
        hinge = torch.clamp(dist - delta, min=0) ** 2
        total = total + torch.log1p(hinge).mean()
    return total / n


def dis_loss(similarity: torch.Tensor, targets: SegTargets, delta: float = 3.0) -> torch.Tensor:
    """Push kernel centroids of different instances at least ``delta`` apart."""
    n = len(targets)
    if n <= 1:
        return similarity.sum() * 0
    _, kernels = _masks(targets, similarity.device)
    g = kernel_centroids(similarity, kernels)
    diff = g[:, None, :] - g[None, :, :]
    off = ~torch.eye(n, dtype=torch.bool, device=g.device)
    dist = torch.linalg.vector_norm(diff[off], dim=-1)
    hinge = torch.clamp(delta - dist, min=0) ** 2
    return torch.log1p(hinge).sum() / (n * (n - 1))


def _stack(arrs, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrs), device=like.device).to(like.dtype)


def total_loss(output: SegOutput, targets: Sequence[SegTargets] | SegTargets,
               config: LossConfig | None = None) -> LossReport:
    """Combine the components as ``region + alpha*kernel + beta*(agg + dis)``, batch-averaged."""
    config = config or LossConfig()
    if isinstance(targets, SegTargets):
        targets = [targets]
    region_gt = _stack([t.region for t in targets], output.region)
    kernel_gt = _stack([t.kernel for t in targets], output.kernel)
    if region_gt.shape != output.region.shape:
        raise ValueError(f"targets {tuple(region_gt.shape)} do not match output {tuple(output.region.shape)}")
    zero = output.region.sum() * 0

    if config.loss_mode == "ce_dice":
        eps = 1e-7
        region = (F.binary_cross_entropy(output.region.clamp(eps, 1 - eps), region_gt)
                  + dice_loss(output.region, region_gt).mean())
        kernel = (F.binary_cross_entropy(output.kernel.clamp(eps, 1 - eps), kernel_gt)
                  + dice_loss(output.kernel, kernel_gt).mean())
        agg = dis = zero
        coverage = 1.0
    else:
        selected = ohem_select(output.region.detach(), region_gt, config.ohem_ratio)
        coverage = float(selected.float().mean())
        region = dice_loss(output.region, region_gt, selected).mean()
        kernel = dice_loss(output.kernel, kernel_gt, region_gt > 0.5).mean()
        agg = torch.stack([agg_loss(s, t, config.delta_agg)
                           for s, t in zip(output.similarity, targets)]).mean()
        dis = torch.stack([dis_loss(s, t, config.delta_dis)
                           for s, t in zip(output.similarity, targets)]).mean()

    total = region + config.alpha * kernel + config.beta * (agg + dis)
    return LossReport(total, region, kernel, agg, dis, coverage)
