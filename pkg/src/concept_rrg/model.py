"""Full concept-aligned report model and its configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .alignment import AlignmentOutput, ConceptAligner
from .concept_bank import ConceptBank, TokenEmbeddingTable
from .corpus import GrammarSpec, Sample, Vocabulary
from .enhancement import MLP, contrast_transform, fuse
from .errors import ConfigError, DataError
from .gating import FeatureGate, GateStates, gate_all
from .generator import GeneratorConfig, ReportGenerator

__all__ = [
    "TrainConfig",
    "FeatureBundle",
    "ConceptReportModel",
    "Batch",
    "make_batch",
    "save_checkpoint",
    "load_checkpoint",
]

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every knob of a training run. Serialized as flat JSON."""

    seed: int = 0
    epochs: int = 16
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.0
    concept_weight: float = 0.5
    aux_weight: float = 0.3
    use_bce: bool = True
    use_cl: bool = True
    use_m: bool = True
    use_fg: bool = True
    temperature: float = 1.0
    detach_entropy: bool = False
    rg_reduction: str = "mean"
    # vision encoder
    dim: int = 32
    patch_size: int = 8
    mixing_layers: int = 1
    pos_embed: bool = True
    # concept decoders
    align_layers: int = 2
    align_heads: int = 4
    query_self_attn: bool = True
    # generator
    gen_d_model: int = 64
    gen_layers: int = 2
    gen_heads: int = 4
    max_len: int = 80
    beam_size: int = 3
    # validation
    val_limit: int = 200
    # paths used by the command line front end
    corpus: str | None = None
    bank: str | None = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.concept_weight < 0 or self.aux_weight < 0:
            raise ConfigError("concept_weight and aux_weight must be nonnegative")
        if self.rg_reduction not in ("sum", "mean"):
            raise ConfigError("rg_reduction must be 'sum' or 'mean'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.use_cl and self.batch_size < 2:
            raise ConfigError("the contrastive loss needs batch_size >= 2 to pair samples")
        if not self.lr > 0 or self.weight_decay < 0 or not self.temperature > 0:
            raise ConfigError("lr and temperature must be positive, weight_decay nonnegative")
        if self.dim % self.align_heads or self.gen_d_model % self.gen_heads:
            raise ConfigError("model widths must be divisible by their head counts")
        if self.max_len < 2 or self.beam_size < 1:
            raise ConfigError("max_len must be >= 2 and beam_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class FeatureBundle:
    visual: torch.Tensor  # [B, N_v, d]
    alignment: AlignmentOutput
    anat_contrast: torch.Tensor
    anat_feats: torch.Tensor
    path_feats: torch.Tensor
    gated_path: torch.Tensor
    gated_anat: torch.Tensor
    gates: GateStates


class ConceptReportModel(nn.Module):
    def __init__(self, bank: ConceptBank, vocab: Vocabulary, cfg: TrainConfig, image_size=(64, 64)):
        super().__init__()
        from .vision import PatchEncoder

        d = cfg.dim
        self.bank, self.vocab, self.cfg = bank, vocab, cfg
        self.image_size = tuple(image_size)
        self.text = TokenEmbeddingTable(bank.words(), d)
        self.register_buffer("pool_p", self.text.pooling_matrix([e.tokens for e in bank.pathologies]))
        self.register_buffer("pool_a", self.text.pooling_matrix([e.tokens for e in bank.anatomies]))
        self.encoder = PatchEncoder(d, cfg.patch_size, self.image_size, cfg.mixing_layers, cfg.pos_embed)
        self.aligner = ConceptAligner(d, cfg.align_heads, cfg.align_layers, cfg.query_self_attn)
        self.contrast_mlp = MLP(d, 2 * d, d)
        self.fuse_mlp = MLP(2 * d, 2 * d, d)
        self.gate_p = FeatureGate(bank.n_pathology, cfg.align_heads, cfg.use_fg, cfg.detach_entropy)
        self.gate_a = FeatureGate(bank.n_anatomy, cfg.align_heads, cfg.use_fg, cfg.detach_entropy)
        self.generator = ReportGenerator(
            GeneratorConfig(
                vocab_size=len(vocab),
                feature_dim=d,
                n_pathology=bank.n_pathology,
                n_anatomy=bank.n_anatomy,
                d_model=cfg.gen_d_model,
                layers=cfg.gen_layers,
                heads=cfg.gen_heads,
                max_len=cfg.max_len,
                beam_size=cfg.beam_size,
                bos_id=vocab.bos_id,
                eos_id=vocab.eos_id,
                pad_id=vocab.pad_id,
            )
        )

    def concept_embeddings(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.text(self.pool_p), self.text(self.pool_a)

    def features(self, images: torch.Tensor) -> FeatureBundle:
        path_queries, anat_queries = self.concept_embeddings()
        visual = self.encoder(images)
        al = self.aligner(anat_queries, path_queries, visual)
        anat_contrast = contrast_transform(al.anat_aligned, self.contrast_mlp)
        anat_feats = fuse(al.anat_aligned, anat_contrast, self.fuse_mlp)
        gated_path, gated_anat, gates = gate_all(al, anat_feats, al.path_feats, self.gate_p, self.gate_a)
        return FeatureBundle(visual, al, anat_contrast, anat_feats, al.path_feats, gated_path, gated_anat, gates)

    def n_parameters(self, part: str | None = None) -> int:
        mod = self if part is None else getattr(self, part)
        return sum(p.numel() for p in mod.parameters())


@dataclass
class Batch:
    images: torch.Tensor  # [B, H, W]
    tokens: torch.Tensor  # [B, T] padded, EOS included
    exist: torch.Tensor  # [B, n_p, n_a] bank order
    path_present: torch.Tensor
    anat_abnormal: torch.Tensor
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def index(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch(
            self.images[idx],
            self.tokens[idx],
            self.exist[idx],
            self.path_present[idx],
            self.anat_abnormal[idx],
            [self.ids[i] for i in idx.tolist()] if self.ids else [],
        )


def make_batch(
    samples: list[Sample],
    bank: ConceptBank,
    grammar: GrammarSpec,
    vocab: Vocabulary,
    dtype=torch.float32,
) -> Batch:
    """Tensorize samples; labels are reindexed into bank order."""
    if not samples:
        raise DataError("empty sample list")
    ids = [vocab.encode(s.report) for s in samples]
    T = max(len(t) for t in ids)
    tokens = torch.full((len(samples), T), vocab.pad_id, dtype=torch.long)
    for r, t in enumerate(ids):
        tokens[r, : len(t)] = torch.tensor(t)
    labels = [bank.labels(grammar, s.triplets) for s in samples]
    return Batch(
        images=torch.tensor(np.stack([s.image for s in samples]), dtype=dtype),
        tokens=tokens,
        exist=torch.tensor(np.stack([lab[0] for lab in labels]), dtype=dtype),
        path_present=torch.tensor(np.stack([lab[1] for lab in labels]), dtype=torch.long),
        anat_abnormal=torch.tensor(np.stack([lab[2] for lab in labels]), dtype=torch.long),
        ids=[s.id for s in samples],
    )


def save_checkpoint(path, model: ConceptReportModel, grammar: GrammarSpec, optimizer=None, step: int = 0,
                    rng_state=None, extra: dict | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": model.cfg.to_dict(),
            "config_hash": model.cfg.model_hash(),
            "step": step,
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
            "rng_state": rng_state,
            "bank": model.bank.to_dict(),
            "grammar": grammar.to_dict(),
            "vocab": model.vocab.itos,
            "image_size": list(model.image_size),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[ConceptReportModel, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ckpt.get('version')!r}")
    cfg = TrainConfig.from_dict(ckpt["config"])
    if cfg.model_hash() != ckpt["config_hash"]:
        raise DataError("checkpoint config hash mismatch")
    vocab = Vocabulary(ckpt["vocab"])
    if vocab.itos != ckpt["vocab"]:
        raise DataError("checkpoint vocabulary is not in canonical order")
    model = ConceptReportModel(ConceptBank.from_dict(ckpt["bank"]), vocab, cfg, ckpt["image_size"])
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model, ckpt


@torch.no_grad()
def predict_reports(model: ConceptReportModel, images: torch.Tensor, beam_size: int = 1, chunk: int = 128) -> list[list[str]]:
    """Decode reports for a stack of images. ``beam_size=1`` runs batched greedy decoding."""
    from .generator import decode, greedy_decode

    model.eval()
    out = []
    for start in range(0, images.shape[0], chunk):
        fb = model.features(images[start : start + chunk])
        if beam_size == 1:
            seqs = greedy_decode(fb.gated_path, fb.gated_anat, model.generator)
        else:
            seqs = [decode(fb.gated_path[b], fb.gated_anat[b], model.generator, beam_size) for b in range(fb.gated_path.shape[0])]
        out.extend(model.vocab.decode(s) for s in seqs)
    return out
