"""Pathology and anatomy concept banks and their text embeddings."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, GrammarSpec, TripletSet, concept_mentions, grammar_hash, load_corpus
from .errors import ConfigError, DataError

__all__ = [
    "ConceptEntry",
    "ConceptBank",
    "ConceptEmbeddings",
    "TokenEmbeddingTable",
    "build_bank",
    "count_concepts",
    "embed_concepts",
    "load_descriptions",
]

BANK_VERSION = 1


@dataclass(frozen=True)
class ConceptEntry:
    name: str
    kind: str
    description: str
    index: int

    @property
    def tokens(self) -> list[str]:
        return self.name.split() + self.description.split()


@dataclass
class ConceptBank:
    pathologies: list[ConceptEntry]
    anatomies: list[ConceptEntry]
    vocab_hash: str

    def __post_init__(self):
        for entries, kind in ((self.pathologies, "pathology"), (self.anatomies, "anatomy")):
            if not entries:
                raise ConfigError(f"empty {kind} bank")
            names = [e.name for e in entries]
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate names in {kind} bank")
            if [e.index for e in entries] != list(range(len(entries))):
                raise ConfigError(f"{kind} bank indices must be dense from 0")
            if any(e.kind != kind or not e.description.strip() for e in entries):
                raise ConfigError(f"malformed {kind} entry")

    @property
    def n_pathology(self) -> int:
        return len(self.pathologies)

    @property
    def n_anatomy(self) -> int:
        return len(self.anatomies)

    @property
    def pathology_names(self) -> list[str]:
        return [e.name for e in self.pathologies]

    @property
    def anatomy_names(self) -> list[str]:
        return [e.name for e in self.anatomies]

    def words(self) -> list[str]:
        return sorted({t for e in self.pathologies + self.anatomies for t in e.tokens})

    def labels(self, grammar: GrammarSpec, triplets: TripletSet):
        """Reindex a grammar-ordered TripletSet into bank order: ``(exist, path_present, anat_abnormal)``."""
        p_idx = [grammar.pathology_names.index(n) for n in self.pathology_names]
        a_idx = [grammar.anatomy_names.index(n) for n in self.anatomy_names]
        exist = triplets.exist[np.ix_(p_idx, a_idx)]
        return exist, exist.any(axis=1).astype(np.uint8), exist.any(axis=0).astype(np.uint8)

    def to_dict(self) -> dict:
        def dump(entries):
            return [{"name": e.name, "description": e.description, "index": e.index} for e in entries]

        return {
            "version": BANK_VERSION,
            "vocab_hash": self.vocab_hash,
            "pathologies": dump(self.pathologies),
            "anatomies": dump(self.anatomies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptBank":
        if d.get("version") != BANK_VERSION:
            raise ConfigError(f"unsupported bank version {d.get('version')!r}")

        def load(entries, kind):
            return [ConceptEntry(e["name"], kind, e["description"], e["index"]) for e in entries]

        return cls(load(d["pathologies"], "pathology"), load(d["anatomies"], "anatomy"), d["vocab_hash"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ConceptBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_descriptions(path=None) -> dict[str, str]:
    """Concept name -> knowledge text. Defaults to the packaged file."""
    if path is None:
        text = resources.files("concept_rrg.data").joinpath("descriptions.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def count_concepts(grammar: GrammarSpec, reports: Iterable) -> tuple[Counter, Counter]:
    """Mention counts of every pathology and anatomy name over parsed reports."""
    p_count, a_count = Counter(), Counter()
    for report in reports:
        paths, anats = concept_mentions(grammar, report)
        p_count.update(paths)
        a_count.update(anats)
    return p_count, a_count


def _select(counts: Counter, min_frequency: int) -> list[str]:
    kept = [(n, c) for n, c in counts.items() if c >= min_frequency]
    return [n for n, _ in sorted(kept, key=lambda nc: (-nc[1], nc[0]))]


def build_bank(
    source,
    descriptions: dict[str, str],
    min_frequency: int = 1,
    grammar: GrammarSpec | None = None,
) -> ConceptBank:
    """Build a bank from a corpus (object or directory) or a stream of reports.

    Concepts mentioned at least ``min_frequency`` times are kept, ordered by
    descending count with lexicographic tie-break.  ``grammar`` is required
    when ``source`` is a plain report stream.
    """
    if isinstance(source, (str, Path)):
        source = load_corpus(source)
    if isinstance(source, Corpus):
        grammar = source.grammar
        reports = [s.report for s in source.samples]
    elif grammar is None:
        raise ConfigError("a grammar is required to parse a report stream")
    else:
        reports = source
    p_count, a_count = count_concepts(grammar, reports)
    p_names, a_names = _select(p_count, min_frequency), _select(a_count, min_frequency)
    if not p_names or not a_names:
        raise ConfigError(f"no concept reaches min_frequency={min_frequency}; bank would be empty")
    missing = [n for n in p_names + a_names if not descriptions.get(n, "").strip()]
    if missing:
        raise ConfigError(f"concepts without description: {', '.join(missing)}")
    return ConceptBank(
        pathologies=[ConceptEntry(n, "pathology", descriptions[n], k) for k, n in enumerate(p_names)],
        anatomies=[ConceptEntry(n, "anatomy", descriptions[n], k) for k, n in enumerate(a_names)],
        vocab_hash=grammar_hash(grammar),
    )


@dataclass
class ConceptEmbeddings:
    path_queries: torch.Tensor
    anat_queries: torch.Tensor


class TokenEmbeddingTable(nn.Module):
    """Trainable word table; a text embeds as the mean of its token rows."""

    def __init__(self, words: Iterable[str], dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.words = sorted(set(words))
        self.index = {w: k for k, w in enumerate(self.words)}
        self.weight = nn.Parameter(torch.randn(len(self.words), dim, generator=generator) / dim**0.5)

    def pooling_matrix(self, texts: list[list[str]]) -> torch.Tensor:
        """Row-stochastic ``[n_texts, vocab]`` matrix of token frequencies."""
        M = torch.zeros(len(texts), len(self.words), dtype=self.weight.dtype)
        for r, toks in enumerate(texts):
            if not toks:
                raise ConfigError(f"text {r} has no tokens")
            for t in toks:
                if t not in self.index:
                    raise ConfigError(f"token {t!r} is not in the embedding vocabulary")
                M[r, self.index[t]] += 1.0 / len(toks)
        return M

    def forward(self, pooling: torch.Tensor) -> torch.Tensor:
        return pooling.to(self.weight.dtype) @ self.weight


def embed_concepts(bank: ConceptBank, table: TokenEmbeddingTable) -> ConceptEmbeddings:
    """Mean-pooled embeddings of ``name ++ description`` for every concept."""
    Mp = table.pooling_matrix([e.tokens for e in bank.pathologies])
    Ma = table.pooling_matrix([e.tokens for e in bank.anatomies])
    return ConceptEmbeddings(path_queries=table(Mp), anat_queries=table(Ma))
