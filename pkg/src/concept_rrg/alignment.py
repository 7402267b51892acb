"""Concept-query decoders that align visual tokens with bank concepts.

Each concept embedding is a query; the visual tokens are keys and values.
One decoder stack serves anatomy concepts and a separately parameterized
twin serves pathology concepts.  Cross-attention maps of every layer and
head are returned since gating and localization analysis both read them.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError, ShapeError

__all__ = [
    "MultiHeadAttention",
    "ConceptDecoderLayer",
    "ConceptDecoder",
    "ConceptAligner",
    "AlignmentOutput",
    "align",
    "alignment_loss",
    "binary_ce",
]


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads, self.head_dim = heads, dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor):
        """``x: [B, nq, d]``, ``memory: [B, nk, d]`` -> ``(out [B, nq, d], attn [B, h, nq, nk])``."""
        B, nq, _ = x.shape
        nk = memory.shape[1]
        h, hd = self.heads, self.head_dim
        q = self.q(x).view(B, nq, h, hd).transpose(1, 2)
        k = self.k(memory).view(B, nk, h, hd).transpose(1, 2)
        v = self.v(memory).view(B, nk, h, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / hd**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, nq, h * hd)
        return self.o(out), attn


class ConceptDecoderLayer(nn.Module):
    """Post-norm decoder layer: [query self-attention], cross-attention, FFN."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 2, self_attn: bool = True):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads) if self_attn else None
        self.norm_sa = nn.LayerNorm(dim) if self_attn else None
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_ca = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))
        self.norm_ffn = nn.LayerNorm(dim)

    def forward(self, q: torch.Tensor, memory: torch.Tensor):
        if self.self_attn is not None:
            q = self.norm_sa(q + self.self_attn(q, q)[0])
        ca, attn = self.cross_attn(q, memory)
        q = self.norm_ca(q + ca)
        q = self.norm_ffn(q + self.ffn(q))
        return q, attn


class ConceptDecoder(nn.Module):
    def __init__(self, dim: int = 32, heads: int = 4, layers: int = 2, self_attn: bool = True):
        super().__init__()
        if layers < 1 or heads < 1:
            raise ShapeError("decoder needs at least one layer and one head")
        self.dim = dim
        self.layers = nn.ModuleList(ConceptDecoderLayer(dim, heads, self_attn=self_attn) for _ in range(layers))

    def forward(self, queries: torch.Tensor, memory: torch.Tensor):
        """``queries: [n, d]`` (shared) or ``[B, n, d]``; returns features and ``attn [B, L, h, n, N]``."""
        if queries.shape[-1] != self.dim or memory.shape[-1] != self.dim:
            raise ShapeError(
                f"feature dims differ: queries {queries.shape[-1]}, visual {memory.shape[-1]}, decoder {self.dim}"
            )
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        maps = []
        q = queries
        for layer in self.layers:
            q, attn = layer(q, memory)
            maps.append(attn)
        return q, torch.stack(maps, dim=1)


@dataclass
class AlignmentOutput:
    anat_aligned: torch.Tensor  # [B, n_a, d]
    path_feats: torch.Tensor  # [B, n_p, d]
    attn_a: torch.Tensor  # [B, L, h, n_a, N_v]
    attn_p: torch.Tensor  # [B, L, h, n_p, N_v]
    logits_a: torch.Tensor  # [B, n_a, 2]; column 0 healthy / absent
    logits_p: torch.Tensor  # [B, n_p, 2]


class ConceptAligner(nn.Module):
    def __init__(self, dim: int = 32, heads: int = 4, layers: int = 2, self_attn: bool = True):
        super().__init__()
        self.decoder_a = ConceptDecoder(dim, heads, layers, self_attn)
        self.decoder_p = ConceptDecoder(dim, heads, layers, self_attn)
        self.head_a = nn.Linear(dim, 2, bias=False)
        self.head_p = nn.Linear(dim, 2, bias=False)

    def forward(self, anat_queries: torch.Tensor, path_queries: torch.Tensor, visual: torch.Tensor) -> AlignmentOutput:
        squeeze = visual.dim() == 2
        if squeeze:
            visual = visual.unsqueeze(0)
        anat_aligned, attn_a = self.decoder_a(anat_queries, visual)
        path_feats, attn_p = self.decoder_p(path_queries, visual)
        out = AlignmentOutput(anat_aligned, path_feats, attn_a, attn_p, self.head_a(anat_aligned), self.head_p(path_feats))
        if squeeze:
            out = AlignmentOutput(*(getattr(out, f)[0] for f in out.__dataclass_fields__))
        return out


def align(anat_queries: torch.Tensor, path_queries: torch.Tensor, visual: torch.Tensor, aligner: ConceptAligner) -> AlignmentOutput:
    return aligner(anat_queries, path_queries, visual)


def binary_ce(logits: torch.Tensor, labels) -> torch.Tensor:
    """Two-logit softmax cross-entropy averaged over the concept axis (second to last)."""
    labels = torch.as_tensor(labels, device=logits.device)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match logits {tuple(logits.shape)}")
    if not torch.isin(labels, torch.tensor([0, 1], device=labels.device)).all():
        raise DataError("labels must be binary")
    nll = -F.log_softmax(logits, dim=-1).gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    return nll.mean(dim=-1)


def alignment_loss(logits_a, anat_abnormal, logits_p, path_present) -> tuple[torch.Tensor, torch.Tensor]:
    """Anatomy health and pathology presence losses (per sample if batched)."""
    return binary_ce(logits_a, anat_abnormal), binary_ce(logits_p, path_present)
