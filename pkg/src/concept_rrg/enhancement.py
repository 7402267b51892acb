"""Anatomy contrastive loss, anatomy feature fusion, and pathology-anatomy matching.

All functions accept optional leading batch dimensions; losses then return
one value per batch element.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import NumericalDomainError, ShapeError

__all__ = [
    "MLP",
    "contrast_transform",
    "contrastive_loss",
    "fuse",
    "matching_loss",
    "cosine_matrix",
]


class MLP(nn.Module):
    """Row-wise two-layer ReLU perceptron."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        return self.fc2(torch.relu(self.fc1(x)))


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise NumericalDomainError("zero-norm feature row; cosine similarity undefined")
    return x / norms


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``[..., n, d] x [..., m, d] -> [..., n, m]`` cosine similarities."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return _unit_rows(a) @ _unit_rows(b).transpose(-1, -2)


def contrast_transform(anat_aligned: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(anat_aligned)


def contrastive_loss(anat_contrast: torch.Tensor, partner_contrast: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Cross-sample anatomy InfoNCE with cosine logits.

    Row ``j`` of the own sample is pulled towards row ``j`` of the other
    sample; all rows of the other sample (positive included) form the
    denominator.
    """
    if anat_contrast.shape != partner_contrast.shape:
        raise ShapeError(f"shapes differ: {tuple(anat_contrast.shape)} vs {tuple(partner_contrast.shape)}")
    logits = cosine_matrix(anat_contrast, partner_contrast) / temperature
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.diagonal(dim1=-2, dim2=-1).mean(dim=-1)


def fuse(anat_aligned: torch.Tensor, anat_contrast: torch.Tensor, mlp: MLP) -> torch.Tensor:
    if anat_aligned.shape != anat_contrast.shape:
        raise ShapeError(f"shapes differ: {tuple(anat_aligned.shape)} vs {tuple(anat_contrast.shape)}")
    return mlp(torch.cat([anat_aligned, anat_contrast], dim=-1))


def matching_loss(path_feats: torch.Tensor, anat_feats: torch.Tensor, exist, path_present) -> torch.Tensor:
    """Mean over present pathologies of ``mean_j |exist[i, j] - max(cos(path_feats[i], anat_feats[j]), 0)|``.

    Zero for samples without any present pathology.
    """
    exist = torch.as_tensor(exist, dtype=path_feats.dtype, device=path_feats.device)
    path_present = torch.as_tensor(path_present, dtype=path_feats.dtype, device=path_feats.device)
    sim = cosine_matrix(path_feats, anat_feats)
    if exist.shape != sim.shape or path_present.shape != sim.shape[:-1]:
        raise ShapeError(f"exist {tuple(exist.shape)} / path_present {tuple(path_present.shape)} do not match features {tuple(sim.shape)}")
    per_path = (exist - sim.clamp(min=0)).abs().mean(dim=-1)
    count = path_present.sum(dim=-1)
    total = (path_present * per_path).sum(dim=-1)
    return torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))
