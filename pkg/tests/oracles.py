"""Independent brute-force reference computations for the text and label metrics."""

import itertools
import math


def count_occurrences(seq, gram):
    k = len(gram)
    return sum(1 for i in range(len(seq) - k + 1) if tuple(seq[i : i + k]) == gram)


def bleu_oracle(cand, ref, n):
    if not cand:
        return 0.0
    precisions = []
    for k in range(1, n + 1):
        grams = {tuple(cand[i : i + k]) for i in range(len(cand) - k + 1)}
        clipped = sum(min(count_occurrences(cand, g), count_occurrences(ref, g)) for g in grams)
        total = len(cand) - k + 1
        if total <= 0 or clipped == 0:
            return 0.0
        precisions.append(clipped / total)
    geo = math.prod(precisions) ** (1.0 / n)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * geo


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs_oracle(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def rouge_oracle(cand, ref):
    if not cand:
        return 0.0
    lcs = lcs_oracle(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def ce_oracle(pred, ref):
    """Per-sample and per-class confusion counts from nested lists of 0/1."""
    n, c = len(pred), len(pred[0])
    ex_p, ex_r, ex_f = [], [], []
    for s in range(n):
        tp = fp = fn = 0
        for k in range(c):
            if pred[s][k] and ref[s][k]:
                tp += 1
            elif pred[s][k]:
                fp += 1
            elif ref[s][k]:
                fn += 1
        if tp + fp + fn == 0:
            ex_p.append(1.0), ex_r.append(1.0), ex_f.append(1.0)
            continue
        ex_p.append(tp / (tp + fp) if tp + fp else 0.0)
        ex_r.append(tp / (tp + fn) if tp + fn else 0.0)
        ex_f.append(2 * tp / (2 * tp + fp + fn))
    per_class = []
    for k in range(c):
        tp = sum(1 for s in range(n) if pred[s][k] and ref[s][k])
        fp = sum(1 for s in range(n) if pred[s][k] and not ref[s][k])
        fn = sum(1 for s in range(n) if ref[s][k] and not pred[s][k])
        per_class.append(
            (
                tp / (tp + fp) if tp + fp else None,
                tp / (tp + fn) if tp + fn else None,
                2 * tp / (2 * tp + fp + fn) if tp + fp + fn else None,
            )
        )

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else 0.0

    example = (sum(ex_p) / n, sum(ex_r) / n, sum(ex_f) / n)
    macro = tuple(mean(col) for col in zip(*per_class))
    return example, macro, per_class
