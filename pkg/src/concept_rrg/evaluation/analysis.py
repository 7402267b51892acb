"""Model-level analyses: report scoring, class-centroid similarity and attention localization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..corpus import GrammarSpec, Sample, generate_sample, sample_seed
from ..errors import DataError, ShapeError
from .metrics import ce_metrics, corpus_bleu, rouge_l

__all__ = [
    "EvalReport",
    "evaluate_model",
    "gate_statistics",
    "make_class_subset",
    "centroid_similarity",
    "interclass_distance",
    "patch_coverage",
    "localization_score",
    "attention_localization",
]


@dataclass
class EvalReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    ce_example: dict
    ce_macro: dict
    per_class: list
    n_samples: int
    unparseable_sentences: int = 0
    analysis: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32)


@torch.no_grad()
def evaluate_model(model, samples: Sequence[Sample], grammar: GrammarSpec, beam_size: int = 1,
                   chunk: int = 128) -> tuple[EvalReport, list[list[str]]]:
    """Decode every sample and score it against its reference report.

    BLEU pools n-gram counts over the corpus; ROUGE-L is the mean per-report
    F1.  Returns the report and the generated token lists.
    """
    from ..model import predict_reports

    if not samples:
        raise DataError("no samples to evaluate")
    generated = predict_reports(model, _images(samples), beam_size=beam_size, chunk=chunk)
    refs = [s.report for s in samples]
    ce = ce_metrics(generated, [s.triplets for s in samples], grammar, model.bank)
    gates = gate_statistics(model, samples, chunk)
    return (
        EvalReport(
            *(corpus_bleu(generated, refs, n) for n in range(1, 5)),
            rouge_l=float(np.mean([rouge_l(g, r) for g, r in zip(generated, refs)])),
            ce_example=ce.example,
            ce_macro=ce.macro,
            per_class=ce.per_class,
            n_samples=len(samples),
            unparseable_sentences=ce.unparseable_sentences,
            analysis={"gates": gates},
        ),
        generated,
    )


@torch.no_grad()
def gate_statistics(model, samples: Sequence[Sample], chunk: int = 128) -> dict:
    """Mean and std of every concept's gate value over ``samples``."""
    model.eval()
    gp, ga = [], []
    images = _images(samples)
    for start in range(0, len(samples), chunk):
        fb = model.features(images[start : start + chunk])
        gp.append(fb.gates.pathology.gates)
        ga.append(fb.gates.anatomy.gates)
    gp, ga = torch.cat(gp).double(), torch.cat(ga).double()

    def table(g, names):
        return {n: {"mean": float(g[:, k].mean()), "std": float(g[:, k].std(unbiased=False))} for k, n in enumerate(names)}

    return {"pathology": table(gp, model.bank.pathology_names), "anatomy": table(ga, model.bank.anatomy_names)}


# ---------------------------------------------------------------------------
# Inter-class feature similarity


def make_class_subset(grammar: GrammarSpec, classes: Sequence, m: int, seed: int) -> tuple[list[Sample], list[int]]:
    """``m`` samples per pathology class, each showing exactly that one finding.

    ``classes`` are pathology names or grammar indices.  The anatomy of each
    finding is drawn uniformly from the compatible ones.  Returns samples and
    their class positions ``0..k-1``.
    """
    idx = [grammar.pathology_names.index(c) if isinstance(c, str) else int(c) for c in classes]
    if len(set(idx)) != len(idx):
        raise DataError("duplicate classes")
    if m < 1:
        raise DataError("need at least one sample per class")
    rng = np.random.default_rng([seed, 104729])
    samples, labels = [], []
    for k, i in enumerate(idx):
        for r in range(m):
            j = int(rng.choice(grammar.compatibility[i]))
            s = generate_sample(grammar, sample_seed(seed, k * m + r), findings=[(i, j)])
            s.id = k * m + r
            samples.append(s)
            labels.append(k)
    return samples, labels


def centroid_similarity(features: np.ndarray, labels: Sequence[int], k: int | None = None) -> tuple[np.ndarray, float]:
    """Cosine-similarity matrix of per-class centroids and its mean off-diagonal entry."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError("features must be [n_samples, d] with one label per row")
    k = int(labels.max()) + 1 if k is None else k
    cents = []
    for c in range(k):
        rows = features[labels == c]
        if len(rows) == 0:
            raise DataError(f"class {c} has no samples")
        cents.append(rows.mean(axis=0))
    C = np.stack(cents)
    norms = np.linalg.norm(C, axis=1)
    if (norms == 0).any():
        raise DataError("a class centroid has zero norm")
    U = C / norms[:, None]
    S = U @ U.T
    off = S[~np.eye(k, dtype=bool)]
    return S, float(off.mean()) if off.size else 0.0


@torch.no_grad()
def interclass_distance(model, samples: Sequence[Sample], labels: Sequence[int], class_names: Sequence[str],
                        chunk: int = 256) -> dict:
    """Centroid similarity of each class's own pathology feature ``path_feats``.

    ``class_names[k]`` names the pathology concept whose feature represents
    samples of class ``k``.
    """
    model.eval()
    rows = [model.bank.pathology_names.index(n) for n in class_names]
    labels = np.asarray(labels)
    images = _images(samples)
    feats = []
    for start in range(0, len(samples), chunk):
        feats.append(model.features(images[start : start + chunk]).path_feats.double())
    path_feats = torch.cat(feats).numpy()
    own = path_feats[np.arange(len(samples)), np.asarray(rows)[labels]]
    S, mean_off = centroid_similarity(own, labels, len(class_names))
    return {"classes": list(class_names), "similarity": S.tolist(), "mean_offdiagonal": mean_off}


# ---------------------------------------------------------------------------
# Attention localization


def patch_coverage(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of each patch covered by a pixel mask, row-major ``[N_v]``."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = mask.shape
    if H % patch_size or W % patch_size:
        raise ShapeError("mask is not divisible into patches")
    return mask.reshape(H // patch_size, patch_size, W // patch_size, patch_size).mean(axis=(1, 3)).ravel()


def localization_score(attn: np.ndarray, coverage: np.ndarray) -> float:
    """Attention mass inside a region divided by the region's area fraction.

    ``attn`` is a distribution over tokens and ``coverage`` the per-token
    fraction inside the region, so uniform attention scores exactly 1.
    """
    attn = np.asarray(attn, dtype=np.float64)
    coverage = np.asarray(coverage, dtype=np.float64)
    if attn.shape != coverage.shape:
        raise ShapeError("attention and coverage shapes differ")
    area = coverage.mean()
    if area <= 0:
        raise DataError("zero-area region")
    return float((attn * coverage).sum() / area)


def _region_mask(grammar: GrammarSpec, sample: Sample, i: int, region: str) -> np.ndarray:
    shape = tuple(grammar.image_size)
    mask = np.zeros(shape, dtype=bool)
    for j in np.nonzero(sample.triplets.exist[i])[0]:
        if region == "anatomy":
            r0, c0, r1, c1 = grammar.region_boxes[j]
            mask[r0:r1, c0:c1] = True
        elif region == "lesion":
            m = sample.lesion_masks.get((int(i), int(j)))
            if m is not None:
                mask |= np.asarray(m, dtype=bool)
        else:
            raise DataError(f"unknown region kind {region!r}")
    return mask


@torch.no_grad()
def attention_localization(model, samples: Sequence[Sample], grammar: GrammarSpec, region: str = "anatomy",
                           chunk: int = 128) -> dict:
    """Localization of the head-averaged final-layer pathology attention.

    For every present pathology of every sample, scores the attention mass
    inside the union of its anatomy boxes (``region="anatomy"``) or of its
    lesion masks (``"lesion"``).  Zero-area regions are skipped and counted.
    """
    model.eval()
    names = model.bank.pathology_names
    g_of_bank = [grammar.pathology_names.index(n) for n in names]
    p = model.encoder.patch_size
    images = _images(samples)
    per_class: dict[str, list[float]] = {n: [] for n in names}
    skipped = 0
    for start in range(0, len(samples), chunk):
        attn = model.features(images[start : start + chunk]).alignment.attn_p[:, -1].mean(dim=1).double().numpy()
        for b, s in enumerate(samples[start : start + chunk]):
            for bi, gi in enumerate(g_of_bank):
                if not s.triplets.exist[gi].any():
                    continue
                cov = patch_coverage(_region_mask(grammar, s, gi, region), p)
                if cov.sum() == 0:
                    skipped += 1
                    continue
                per_class[names[bi]].append(localization_score(attn[b, bi], cov))
    scores = [v for vs in per_class.values() for v in vs]
    return {
        "region": region,
        "mean": float(np.mean(scores)) if scores else float("nan"),
        "n_scored": len(scores),
        "skipped": skipped,
        "per_class": {n: float(np.mean(v)) for n, v in per_class.items() if v},
    }
