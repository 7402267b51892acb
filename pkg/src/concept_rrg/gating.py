"""Attention-entropy feature gating.

A concept whose cross-attention is spread evenly over the image is taken to
have extracted a weak feature.  Per-head entropies of the final-layer
attention map are projected by a per-concept weight vector (no bias) and
squashed into a scalar gate that rescales the concept feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .alignment import AlignmentOutput
from .errors import DataError, ShapeError

__all__ = ["attention_entropy", "gate_features", "FeatureGate", "GateState", "GateStates", "gate_all"]


def attention_entropy(attn_rows: torch.Tensor, validate: bool = True, tol: float = 1e-6) -> torch.Tensor:
    """Natural-log entropy over the last axis, with ``0 * ln 0 = 0``."""
    if validate:
        if (attn_rows < 0).any() or ((attn_rows.sum(dim=-1) - 1).abs() > tol).any():
            raise DataError("attention rows must be nonnegative and sum to 1")
    positive = attn_rows > 0
    safe = torch.where(positive, attn_rows, torch.ones_like(attn_rows))
    return -torch.where(positive, attn_rows * torch.log(safe), torch.zeros_like(attn_rows)).sum(dim=-1)


def gate_features(features: torch.Tensor, entropies: torch.Tensor, gate_weight: torch.Tensor):
    """``gate[i] = sigmoid(entropies[i] . gate_weight[i])``, ``features[i] -> gate[i] * features[i]``.

    ``features: [..., n, d]``, ``entropies: [..., n, heads]``, ``gate_weight: [n, heads]``.
    Returns ``(gated features, gates [..., n])``.
    """
    if entropies.shape[-2:] != gate_weight.shape or features.shape[:-1] != entropies.shape[:-1]:
        raise ShapeError(
            f"features {tuple(features.shape)}, entropies {tuple(entropies.shape)}, gate_weight {tuple(gate_weight.shape)} disagree"
        )
    gates = torch.sigmoid((entropies * gate_weight).sum(dim=-1))
    return gates.unsqueeze(-1) * features, gates


@dataclass
class GateState:
    entropies: torch.Tensor  # [..., n, heads]
    gates: torch.Tensor  # [..., n]
    gate_weight: torch.Tensor  # [n, heads]


@dataclass
class GateStates:
    pathology: GateState
    anatomy: GateState


class FeatureGate(nn.Module):
    """Per-concept entropy projection. Disabled gates are constant 1."""

    def __init__(self, n_concepts: int, heads: int, enabled: bool = True, detach_entropy: bool = False):
        super().__init__()
        self.gate_weight = nn.Parameter(torch.zeros(n_concepts, heads))
        self.enabled = enabled
        self.detach_entropy = detach_entropy

    def forward(self, features: torch.Tensor, final_attn: torch.Tensor):
        """``final_attn: [..., heads, n, N_v]`` (one decoder layer)."""
        ent = attention_entropy(final_attn.transpose(-2, -3), validate=False)
        if self.detach_entropy:
            ent = ent.detach()
        if not self.enabled:
            gates = torch.ones(features.shape[:-1], dtype=features.dtype, device=features.device)
            return features * gates.unsqueeze(-1), GateState(ent, gates, self.gate_weight)
        gated, gates = gate_features(features, ent, self.gate_weight)
        return gated, GateState(ent, gates, self.gate_weight)


def gate_all(alignment: AlignmentOutput, anat_feats: torch.Tensor, path_feats: torch.Tensor, gate_p: FeatureGate, gate_a: FeatureGate):
    """Gate pathology and anatomy features with their final-layer attention maps."""
    gated_path, state_p = gate_p(path_feats, alignment.attn_p[..., -1, :, :, :])
    gated_anat, state_a = gate_a(anat_feats, alignment.attn_a[..., -1, :, :, :])
    return gated_path, gated_anat, GateStates(pathology=state_p, anatomy=state_a)
