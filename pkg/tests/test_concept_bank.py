import json
from collections import Counter

import numpy as np
import pytest
import torch

from concept_rrg.concept_bank import (
    ConceptBank,
    ConceptEntry,
    TokenEmbeddingTable,
    build_bank,
    embed_concepts,
    load_descriptions,
)
from concept_rrg.corpus import default_grammar, generate_sample, grammar_hash
from concept_rrg.errors import ConfigError
from fdcheck import check_grads


@pytest.fixture(scope="module")
def grammar():
    return default_grammar()


def brute_force_counts(names, reports):
    counts = Counter()
    for r in reports:
        padded = f" {' '.join(r)} "
        for n in names:
            counts[n] += padded.count(f" {n} ")
    return counts


def test_packaged_descriptions_cover_default_grammar(grammar):
    d = load_descriptions()
    for name in grammar.pathology_names + grammar.anatomy_names:
        assert d[name].strip()


def test_default_corpus_bank_matches_frequency_oracle(default_corpus, default_bank):
    g = default_corpus.grammar
    reports = [s.report for s in default_corpus.samples]
    assert set(default_bank.pathology_names) == set(g.pathology_names)
    assert set(default_bank.anatomy_names) == set(g.anatomy_names)
    for names, bank_names in ((g.pathology_names, default_bank.pathology_names), (g.anatomy_names, default_bank.anatomy_names)):
        counts = brute_force_counts(names, reports)
        expected = sorted(names, key=lambda n: (-counts[n], n))
        assert bank_names == expected
    assert default_bank.vocab_hash == grammar_hash(g)


def test_most_frequent_concept_first(grammar):
    reports = [["opacity", "is", "seen", "in", "the", "heart", "."]] * 100 + [
        ["there", "is", "no", "mass", "."],
        ["the", "mediastinum", "is", "normal", "."],
    ]
    bank = build_bank(reports, load_descriptions(), grammar=grammar)
    assert bank.pathology_names[0] == "opacity" and bank.pathologies[0].index == 0
    assert bank.pathology_names == ["opacity", "mass"]
    assert bank.anatomy_names == ["heart", "mediastinum"]


def test_lexicographic_tie_break(grammar):
    reports = [["there", "is", "no", n, "."] for n in ("pneumonia", "edema", "mass")]
    reports.append(["the", "heart", "is", "normal", "."])
    bank = build_bank(reports, load_descriptions(), grammar=grammar)
    assert bank.pathology_names == ["edema", "mass", "pneumonia"]


def test_min_frequency_above_all_counts(small_corpus):
    with pytest.raises(ConfigError, match="empty"):
        build_bank(small_corpus, load_descriptions(), min_frequency=10**6)


def test_missing_description_lists_names(small_corpus):
    d = dict(load_descriptions())
    del d["edema"], d["heart"]
    with pytest.raises(ConfigError, match="edema, heart|heart, edema"):
        build_bank(small_corpus, d)


def test_report_stream_needs_grammar():
    with pytest.raises(ConfigError):
        build_bank([["no", "acute", "findings", "."]], load_descriptions())


def test_serialization_round_trip(tmp_path, small_bank):
    small_bank.save(tmp_path / "b.json")
    loaded = ConceptBank.load(tmp_path / "b.json")
    assert loaded == small_bank
    loaded.save(tmp_path / "c.json")
    assert (tmp_path / "b.json").read_bytes() == (tmp_path / "c.json").read_bytes()
    d = json.loads((tmp_path / "b.json").read_text())
    assert d["version"] == 1 and d["vocab_hash"] == small_bank.vocab_hash


def test_bank_validation():
    p = [ConceptEntry("a", "pathology", "x", 0)]
    a = [ConceptEntry("b", "anatomy", "y", 0)]
    with pytest.raises(ConfigError):
        ConceptBank([], a, "h")
    with pytest.raises(ConfigError):
        ConceptBank(p + [ConceptEntry("a", "pathology", "x", 1)], a, "h")
    with pytest.raises(ConfigError):
        ConceptBank([ConceptEntry("a", "pathology", "x", 1)], a, "h")
    with pytest.raises(ConfigError):
        ConceptBank([ConceptEntry("a", "pathology", " ", 0)], a, "h")


def test_labels_reindex_to_bank_order(grammar, default_bank):
    s = generate_sample(grammar, 3, findings=[(0, 1), (8, 4)])
    exist, path_present, anat_abnormal = default_bank.labels(grammar, s.triplets)
    for bi, name in enumerate(default_bank.pathology_names):
        for bj, anat in enumerate(default_bank.anatomy_names):
            gi, gj = grammar.pathology_names.index(name), grammar.anatomy_names.index(anat)
            assert exist[bi, bj] == s.triplets.exist[gi, gj]
    np.testing.assert_array_equal(path_present, exist.any(axis=1))
    np.testing.assert_array_equal(anat_abnormal, exist.any(axis=0))


def bank_of(entries_p, entries_a):
    return ConceptBank(
        [ConceptEntry(n, "pathology", d, k) for k, (n, d) in enumerate(entries_p)],
        [ConceptEntry(n, "anatomy", d, k) for k, (n, d) in enumerate(entries_a)],
        "h",
    )


def test_single_token_concept_is_its_row():
    table = TokenEmbeddingTable(["x", "y"], 5)
    M = table.pooling_matrix([["y"]])
    torch.testing.assert_close(table(M)[0], table.weight[1], rtol=0, atol=0)


def test_identical_texts_give_identical_rows():
    bank = bank_of([("x", "y z"), ("w", "y z")], [("x", "y z")])
    emb = embed_concepts(bank, TokenEmbeddingTable(bank.words(), 4))
    assert emb.path_queries.shape == (2, 4) and emb.anat_queries.shape == (1, 4)
    assert torch.equal(emb.path_queries[0], emb.anat_queries[0])
    assert not torch.equal(emb.path_queries[0], emb.path_queries[1])


def test_mean_pooling_is_order_insensitive():
    table = TokenEmbeddingTable(["a", "b", "c"], 6)
    M = table.pooling_matrix([["a", "b", "c", "a"], ["c", "a", "a", "b"]])
    torch.testing.assert_close(table(M)[0], table(M)[1])
    expected = (2 * table.weight[0] + table.weight[1] + table.weight[2]) / 4
    torch.testing.assert_close(table(M)[0], expected)


def test_oov_token_named():
    table = TokenEmbeddingTable(["a"], 3)
    with pytest.raises(ConfigError, match="'zebra'"):
        table.pooling_matrix([["a", "zebra"]])


def test_embedding_gradient_matches_finite_differences(float64):
    torch.manual_seed(0)
    table = TokenEmbeddingTable(["a", "b", "c", "d"], 3)
    M = table.pooling_matrix([["a", "b"], ["c", "d", "d"], ["a"]])
    target = torch.randn(3, 3)
    check_grads(lambda: ((table(M) - target) ** 2).sum() + table(M).sin().sum(), [table.weight])
