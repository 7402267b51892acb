"""Prefix-conditioned causal report generator and decoders.

Gated pathology features and gated anatomy features are projected by two
separate MLPs into the model width and laid out as a prefix, one position
per concept (pathologies first, then anatomies, bank order).  Text
positions see the whole prefix and earlier text only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .enhancement import MLP
from .errors import ConfigError, DataError, ShapeError

__all__ = [
    "GeneratorConfig",
    "ReportGenerator",
    "generation_loss",
    "greedy_decode",
    "beam_search",
    "decode",
    "step_topk",
]


@dataclass
class GeneratorConfig:
    vocab_size: int
    feature_dim: int
    n_pathology: int
    n_anatomy: int
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    max_len: int = 96
    beam_size: int = 3
    bos_id: int = 1
    eos_id: int = 2
    pad_id: int = 0

    def validate(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if min(self.vocab_size, self.max_len, self.layers, self.n_pathology, self.n_anatomy) < 1:
            raise ConfigError("generator sizes must be positive")

    def to_dict(self):
        return asdict(self)


class _Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).view(B, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / (d // h) ** 0.5
        scores = scores.masked_fill(~allowed, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        x = x + self.proj(att.transpose(1, 2).reshape(B, L, d))
        return x + self.ffn(self.ln2(x))


class ReportGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, zero_init_head: bool = False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, D = cfg.feature_dim, cfg.d_model
        self.mlp_p = MLP(d, D, D)
        self.mlp_a = MLP(d, D, D)
        self.n_prefix = cfg.n_pathology + cfg.n_anatomy
        self.slot = nn.Parameter(0.02 * torch.randn(self.n_prefix, D))
        self.tok = nn.Embedding(cfg.vocab_size, D)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_len, D))
        self.blocks = nn.ModuleList(_Block(D, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(D)
        self.head = nn.Linear(D, cfg.vocab_size)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def prefix(self, gated_path: torch.Tensor, gated_anat: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.mlp_p(gated_path), self.mlp_a(gated_anat)], dim=-2) + self.slot

    def _mask(self, T: int, device) -> torch.Tensor:
        P = self.n_prefix
        allowed = torch.zeros(P + T, P + T, dtype=torch.bool, device=device)
        allowed[:, :P] = True
        allowed[P:, P:] = torch.tril(torch.ones(T, T, dtype=torch.bool, device=device))
        return allowed

    def forward(self, gated_path: torch.Tensor, gated_anat: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        """Logits ``[B, T, V]`` for every text position of ``input_ids [B, T]``."""
        T = input_ids.shape[-1]
        if T > self.cfg.max_len:
            raise ShapeError(f"sequence of {T} tokens exceeds max_len {self.cfg.max_len}")
        if gated_path.shape[-2] != self.cfg.n_pathology or gated_anat.shape[-2] != self.cfg.n_anatomy:
            raise ShapeError("prefix features do not match the configured bank sizes")
        x = torch.cat([self.prefix(gated_path, gated_anat), self.tok(input_ids) + self.pos[:T]], dim=1)
        allowed = self._mask(T, x.device)
        for blk in self.blocks:
            x = blk(x, allowed)
        return self.head(self.ln_f(x[:, self.n_prefix :]))


def _as_batch(tokens, pad_id: int) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens if tokens.dim() == 2 else tokens.unsqueeze(0)
    tokens = list(tokens)
    if tokens and isinstance(tokens[0], (int, np.integer)):
        tokens = [tokens]
    L = max(len(t) for t in tokens)
    return torch.tensor([list(t) + [pad_id] * (L - len(t)) for t in tokens], dtype=torch.long)


def generation_loss(gated_path, gated_anat, tokens, generator: ReportGenerator, reduction: str = "sum") -> torch.Tensor:
    """Teacher-forced negative log-likelihood of ``tokens`` (EOS included by the caller).

    ``tokens`` is one id sequence or a padded batch ``[B, T]``.  Returns the
    per-sample sum over positions (``reduction="sum"``) or the per-token
    mean (``"mean"``); unbatched features give a scalar.
    """
    cfg = generator.cfg
    squeeze = gated_path.dim() == 2
    if squeeze:
        gated_path, gated_anat = gated_path.unsqueeze(0), gated_anat.unsqueeze(0)
    y = _as_batch(tokens, cfg.pad_id).to(gated_path.device)
    if y.shape[0] != gated_path.shape[0]:
        raise ShapeError("token batch and feature batch sizes differ")
    if y.shape[1] > cfg.max_len:
        raise DataError(f"report of {y.shape[1]} tokens exceeds max_len {cfg.max_len}")
    if (y < 0).any() or (y >= cfg.vocab_size).any():
        raise DataError("token id outside the vocabulary")
    inp = torch.cat([torch.full_like(y[:, :1], cfg.bos_id), y[:, :-1]], dim=1)
    logits = generator(gated_path, gated_anat, inp)
    nll = F.cross_entropy(logits.transpose(1, 2), y, ignore_index=cfg.pad_id, reduction="none")
    valid = (y != cfg.pad_id).to(nll.dtype)
    out = (nll * valid).sum(dim=1)
    if reduction == "mean":
        out = out / valid.sum(dim=1).clamp(min=1)
    elif reduction != "sum":
        raise ConfigError(f"unknown reduction {reduction!r}")
    return out[0] if squeeze else out


@torch.no_grad()
def greedy_decode(gated_path, gated_anat, generator: ReportGenerator, max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; each sequence stops at EOS (included) or ``max_len``."""
    cfg = generator.cfg
    max_len = min(max_len or cfg.max_len, cfg.max_len)
    if gated_path.dim() == 2:
        gated_path, gated_anat = gated_path.unsqueeze(0), gated_anat.unsqueeze(0)
    B = gated_path.shape[0]
    seq = torch.full((B, 1), cfg.bos_id, dtype=torch.long, device=gated_path.device)
    done = torch.zeros(B, dtype=torch.bool, device=gated_path.device)
    out: list[list[int]] = [[] for _ in range(B)]
    for _ in range(max_len):
        nxt = generator(gated_path, gated_anat, seq)[:, -1].argmax(dim=-1)
        for b in torch.nonzero(~done).flatten().tolist():
            out[b].append(int(nxt[b]))
        done |= nxt == cfg.eos_id
        if done.all():
            break
        seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
    return out


def beam_search(
    log_prob_fn: Callable[[list[tuple[int, ...]]], np.ndarray],
    eos_id: int,
    beam_size: int,
    max_len: int,
) -> tuple[list[int], float]:
    """Length-normalized beam search over an arbitrary next-token model.

    ``log_prob_fn`` maps a list of emitted-token prefixes to a ``[k, V]``
    array of next-token log-probabilities.  A hypothesis scores the mean
    log-probability of its emitted tokens (EOS counts).  At each step the
    best ``beam_size`` expansions are kept, ordered by score, then token
    index, then beam index; those ending in EOS retire.  Returns the best
    retired (or length-capped) hypothesis and its score.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(max_len):
        lp = np.asarray(log_prob_fn([h[0] for h in alive]), dtype=np.float64)
        cands = []
        for b, (toks, total) in enumerate(alive):
            n = len(toks) + 1
            for v in range(lp.shape[1]):
                s = total + lp[b, v]
                cands.append((-(s / n), v, b, toks + (v,), s))
        cands.sort(key=lambda c: c[:3])
        alive = []
        for neg, v, _, toks, s in cands[:beam_size]:
            if v == eos_id:
                finished.append((-neg, toks))
            else:
                alive.append((toks, s))
        if not alive:
            break
    finished.extend((s / len(t), t) for t, s in alive)
    best = max(range(len(finished)), key=lambda k: (finished[k][0], -k))
    return list(finished[best][1]), float(finished[best][0])


@torch.no_grad()
def decode(gated_path, gated_anat, generator: ReportGenerator, beam_size: int | None = None, max_len: int | None = None) -> list[int]:
    """Beam-decode one sample (features ``[n, d]``); output ends with EOS unless capped."""
    cfg = generator.cfg
    beam_size = beam_size or cfg.beam_size
    max_len = min(max_len or cfg.max_len, cfg.max_len)
    if gated_path.dim() == 3:
        gated_path, gated_anat = gated_path[0], gated_anat[0]

    def log_probs(prefixes):
        k = len(prefixes)
        ids = torch.tensor([[cfg.bos_id, *p] for p in prefixes], dtype=torch.long, device=gated_path.device)
        logits = generator(gated_path.expand(k, -1, -1), gated_anat.expand(k, -1, -1), ids)[:, -1]
        return torch.log_softmax(logits.double(), dim=-1).cpu().numpy()

    tokens, _ = beam_search(log_probs, cfg.eos_id, beam_size, max_len)
    return tokens


@torch.no_grad()
def step_topk(gated_path, gated_anat, tokens: Sequence[int], generator: ReportGenerator, k: int = 5) -> list[dict]:
    """Per-step top-``k`` next-token log-probabilities along a decoded sequence."""
    cfg = generator.cfg
    if gated_path.dim() == 2:
        gated_path, gated_anat = gated_path.unsqueeze(0), gated_anat.unsqueeze(0)
    ids = torch.tensor([[cfg.bos_id, *tokens[:-1]]], dtype=torch.long, device=gated_path.device)
    logp = torch.log_softmax(generator(gated_path, gated_anat, ids)[0].double(), dim=-1)
    top = logp.topk(min(k, logp.shape[-1]), dim=-1)
    return [
        {
            "step": t,
            "chosen": int(tokens[t]),
            "chosen_logprob": float(logp[t, tokens[t]]),
            "top": [[int(i), float(v)] for v, i in zip(top.values[t], top.indices[t])],
        }
        for t in range(len(tokens))
    ]
