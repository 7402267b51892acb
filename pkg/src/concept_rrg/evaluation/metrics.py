"""Text-overlap and clinical-efficacy metrics.

BLEU is unsmoothed (any zero k-gram precision gives 0); corpus BLEU pools
clipped counts and lengths over all pairs.  ROUGE-L is the LCS F1.  Clinical
efficacy compares pathology-presence labels extracted by the grammar parser.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..concept_bank import ConceptBank
from ..corpus import GrammarSpec, TripletSet, grammar_hash, parse_report_lenient
from ..errors import ConfigError, DataError

__all__ = [
    "bleu",
    "corpus_bleu",
    "rouge_l",
    "lcs_length",
    "CEResult",
    "ce_from_labels",
    "ce_metrics",
]


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence, k: int) -> Counter:
    return Counter(tuple(tokens[i : i + k]) for i in range(len(tokens) - k + 1))


def _clipped(cand, ref, k) -> tuple[int, int]:
    c, r = _ngrams(cand, k), _ngrams(ref, k)
    return sum(min(cnt, r[g]) for g, cnt in c.items()), max(len(cand) - k + 1, 0)


def _combine(matches, totals, c_len, r_len, n) -> float:
    if c_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu(candidate, reference, n: int = 4) -> float:
    """Sentence BLEU-n with uniform weights and brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ConfigError("BLEU order must be in 1..4")
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise DataError("empty reference")
    stats = [_clipped(cand, ref, k) for k in range(1, n + 1)]
    return _combine([s[0] for s in stats], [s[1] for s in stats], len(cand), len(ref), n)


def corpus_bleu(candidates, references, n: int = 4) -> float:
    if len(candidates) != len(references):
        raise DataError("candidate and reference counts differ")
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = _tokens(cand), _tokens(ref)
        c_len += len(cand)
        r_len += len(ref)
        for k in range(1, n + 1):
            m, t = _clipped(cand, ref, k)
            matches[k - 1] += m
            totals[k - 1] += t
    return _combine(matches, totals, c_len, r_len, n)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """ROUGE-L F1 (beta = 1)."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not ref:
        raise DataError("empty reference")
    if not cand:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


@dataclass
class CEResult:
    example: dict  # {"P", "R", "F1"}
    macro: dict
    per_class: list = field(default_factory=list)
    unparseable_sentences: int = 0

    def to_dict(self):
        return asdict(self)


def _mean_defined(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def ce_from_labels(pred, ref, class_names: Sequence[str] | None = None) -> CEResult:
    """Example-based and macro P/R/F1 from binary label matrices ``[N, C]``.

    Example-based: per-sample scores averaged; a sample with no reference
    and no predicted positives scores 1, a zero denominator otherwise scores
    0.  Macro: per-class scores averaged over classes where each score is
    defined; undefined ones are reported as ``None`` and left out.
    """
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape or pred.ndim != 2:
        raise DataError("prediction and reference label matrices must have the same [N, C] shape")
    tp = (pred & ref).sum(axis=1)
    fp = (pred & ~ref).sum(axis=1)
    fn = (~pred & ref).sum(axis=1)
    both_empty = (tp + fp + fn) == 0
    P = np.where(both_empty, 1.0, np.divide(tp, tp + fp, out=np.zeros(len(tp)), where=(tp + fp) > 0))
    R = np.where(both_empty, 1.0, np.divide(tp, tp + fn, out=np.zeros(len(tp)), where=(tp + fn) > 0))
    F = np.where(both_empty, 1.0, np.divide(2 * tp, 2 * tp + fp + fn, out=np.zeros(len(tp)), where=~both_empty))
    example = {"P": float(P.mean()), "R": float(R.mean()), "F1": float(F.mean())} if len(tp) else {"P": 0.0, "R": 0.0, "F1": 0.0}

    names = list(class_names) if class_names is not None else [str(c) for c in range(pred.shape[1])]
    per_class = []
    for c, name in enumerate(names):
        ctp = int((pred[:, c] & ref[:, c]).sum())
        cfp = int((pred[:, c] & ~ref[:, c]).sum())
        cfn = int((~pred[:, c] & ref[:, c]).sum())
        per_class.append(
            {
                "name": name,
                "tp": ctp,
                "fp": cfp,
                "fn": cfn,
                "P": ctp / (ctp + cfp) if ctp + cfp else None,
                "R": ctp / (ctp + cfn) if ctp + cfn else None,
                "F1": 2 * ctp / (2 * ctp + cfp + cfn) if ctp + cfp + cfn else None,
            }
        )
    macro = {k: _mean_defined(row[k] for row in per_class) for k in ("P", "R", "F1")}
    return CEResult(example=example, macro=macro, per_class=per_class)


def _labels(grammar, item, bank):
    if isinstance(item, TripletSet):
        ts, bad = item, 0
    elif isinstance(item, str) or (isinstance(item, (list, tuple)) and all(isinstance(t, str) for t in item)):
        ts, bad = parse_report_lenient(grammar, item)
    else:
        return np.asarray(item).astype(bool), 0
    y = bank.labels(grammar, ts)[1] if bank is not None else ts.path_present
    return y.astype(bool), bad


def ce_metrics(generated, references, grammar: GrammarSpec, bank: ConceptBank | None = None) -> CEResult:
    """Clinical efficacy of generated reports against references.

    ``generated`` are reports (strings or token lists); ``references`` are
    reports, TripletSets, or pathology label vectors already in bank order.
    Sentences the parser cannot match contribute no labels and are counted.
    """
    if bank is not None and bank.vocab_hash != grammar_hash(grammar):
        raise DataError("bank and grammar hashes differ")
    if len(generated) != len(references):
        raise DataError("generated and reference counts differ")
    pred, ref, bad = [], [], 0
    for g, r in zip(generated, references):
        yg, b = _labels(grammar, g, bank)
        yr, _ = _labels(grammar, r, bank)
        pred.append(yg)
        ref.append(yr)
        bad += b
    names = bank.pathology_names if bank is not None else list(grammar.pathology_names)
    n_cls = len(names)
    res = ce_from_labels(
        np.array(pred).reshape(-1, n_cls), np.array(ref).reshape(-1, n_cls), names
    )
    res.unparseable_sentences = bad
    return res
