import json

import pytest
import torch

from concept_rrg.concept_bank import build_bank, load_descriptions
from concept_rrg.corpus import Vocabulary, default_grammar, grammar_hash
from concept_rrg.errors import ConfigError, DataError
from concept_rrg.model import ConceptReportModel, TrainConfig, load_checkpoint, make_batch, save_checkpoint
from concept_rrg.training import COMPONENTS, recombine, total_loss, train

SMALL = dict(dim=8, align_heads=2, gen_d_model=16, gen_layers=1, gen_heads=2, batch_size=8, val_limit=6)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


@pytest.fixture
def setup(small_corpus, small_bank):
    vocab = Vocabulary.from_grammar(small_corpus.grammar)
    batch = make_batch(small_corpus.samples[:6], small_bank, small_corpus.grammar, vocab)
    return small_corpus, small_bank, vocab, batch


def build(setup, seed=0, **kw):
    corpus, bank, vocab, _ = setup
    torch.manual_seed(seed)
    return ConceptReportModel(bank, vocab, small_config(**kw), corpus.grammar.image_size)


def test_recombination_identity(setup):
    model = build(setup)
    for b0, b1 in ((0.5, 0.3), (1.7, 0.0), (0.0, 2.5)):
        cfg = small_config(concept_weight=b0, aux_weight=b1)
        loss, comps = total_loss(model, setup[3], cfg)
        assert set(comps) == set(COMPONENTS)
        assert abs(loss.item() - recombine({k: v.item() for k, v in comps.items()}, b0, b1)) <= 1e-12
        assert loss.dtype == torch.float64


def test_zero_weights_leave_generation_loss(setup):
    model = build(setup)
    loss, comps = total_loss(model, setup[3], small_config(concept_weight=0.0, aux_weight=0.0))
    assert loss.item() == comps["generation"].item()


def test_disabled_losses_are_exact_zeros(setup):
    model = build(setup, use_bce=False, use_cl=False, use_m=False, use_fg=False)
    loss, comps = total_loss(model, setup[3])
    for k in ("anat_cls", "path_cls", "contrastive", "matching"):
        assert comps[k].item() == 0.0
    assert loss.item() == comps["generation"].item()


def test_components_are_batch_means(setup):
    model = build(setup)
    batch = setup[3]
    _, full = total_loss(model, batch, small_config(use_cl=False))
    singles = [total_loss(model, batch.index([i]), small_config(use_cl=False))[1] for i in range(len(batch))]
    for k in ("anat_cls", "path_cls", "matching", "generation"):
        mean = sum(s[k].item() for s in singles) / len(singles)
        assert full[k].item() == pytest.approx(mean, rel=1e-5)


def test_contrastive_needs_two_samples(setup):
    model = build(setup)
    with pytest.raises(ConfigError):
        total_loss(model, setup[3].index([0]))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    total_loss(model, setup[3].index([0]), small_config(use_cl=False))


def test_fg_off_equals_unit_gates(setup):
    on = build(setup, seed=3, use_fg=True)
    off = build(setup, seed=3, use_fg=False)
    off.load_state_dict(on.state_dict())
    batch = setup[3]
    with torch.no_grad():
        # entropies are strictly positive, so an infinite weight saturates every gate at exactly 1
        on.gate_p.gate_weight.fill_(float("inf"))
        on.gate_a.gate_weight.fill_(float("inf"))
        a, b = on.features(batch.images), off.features(batch.images)
        assert torch.equal(a.gates.pathology.gates, torch.ones_like(a.gates.pathology.gates))
        assert torch.equal(a.gated_path, b.gated_path) and torch.equal(a.gated_anat, b.gated_anat)
        assert torch.equal(b.gated_path, b.path_feats) and torch.equal(b.gated_anat, b.anat_feats)
        assert total_loss(on, batch)[0].item() == total_loss(off, batch)[0].item()


def test_config_round_trip_and_validation(tmp_path):
    cfg = small_config(seed=4, lr=1e-3)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    assert cfg.model_hash() == TrainConfig.from_dict(cfg.to_dict()).model_hash()
    assert cfg.concept_weight == 0.5 and cfg.aux_weight == 0.3 and cfg.beam_size == 3
    for bad in (dict(concept_weight=-1.0), dict(rg_reduction="max"), dict(epochs=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"version": 99})


def test_first_ten_steps_are_deterministic(small_corpus, small_bank):
    runs = [train(small_config(epochs=2), small_corpus, small_bank, validate_every_epoch=False, max_steps=10) for _ in range(2)]
    logs = [[r for r in run.log if "loss" in r] for run in runs]
    assert len(logs[0]) == 10
    assert logs[0] == logs[1]


def test_zero_epochs_keep_initialization(small_corpus, small_bank, tmp_path):
    cfg = small_config(epochs=0, seed=5)
    result = train(cfg, small_corpus, small_bank, out_dir=tmp_path)
    torch.manual_seed(5)
    fresh = ConceptReportModel(small_bank, Vocabulary.from_grammar(small_corpus.grammar), cfg, (64, 64))
    loaded, ckpt = load_checkpoint(tmp_path / "last.pt")
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k]), k
    assert ckpt["step"] == 0 and result.step == 0


def test_training_outputs(small_corpus, small_bank, tmp_path):
    result = train(small_config(epochs=1), small_corpus, small_bank, out_dir=tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"config.resolved.json", "metrics.jsonl", "last.pt", "best.pt"}
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    steps = [r for r in records if "loss" in r]
    assert len(steps) == result.step == 6
    for r in steps:
        assert set(COMPONENTS) <= set(r)
        assert r["loss"] == pytest.approx(recombine(r, 0.5, 0.3), abs=1e-9)
    assert "val_macro_F1" in records[0] and "val_generation" in records[-1]
    assert json.loads((tmp_path / "config.resolved.json").read_text())["epochs"] == 1


def test_checkpoint_round_trip_is_bit_identical(setup, tmp_path):
    corpus, _, _, batch = setup
    model = build(setup, seed=8).eval()
    opt = torch.optim.Adam(model.parameters())
    save_checkpoint(tmp_path / "m.pt", model, corpus.grammar, opt, step=3)
    loaded, ckpt = load_checkpoint(tmp_path / "m.pt")
    with torch.no_grad():
        a, b = model.features(batch.images), loaded.features(batch.images)
        assert torch.equal(a.gated_path, b.gated_path) and torch.equal(a.alignment.attn_p, b.alignment.attn_p)
        ids = batch.tokens[:, :6]
        assert torch.equal(model.generator(a.gated_path, a.gated_anat, ids), loaded.generator(b.gated_path, b.gated_anat, ids))
    assert ckpt["step"] == 3 and ckpt["config_hash"] == model.cfg.model_hash()
    assert ckpt["optimizer_state"] is not None


def test_bank_hash_mismatch(small_corpus):
    other = default_grammar()
    reports = [s.report for s in small_corpus.samples]
    bank = build_bank(reports, load_descriptions(), grammar=other)
    bank.vocab_hash = "deadbeef"
    with pytest.raises(DataError):
        train(small_config(epochs=1), small_corpus, bank)
    assert grammar_hash(other) == small_corpus.grammar_hash


def test_batch_labels_follow_bank_order(setup):
    corpus, bank, vocab, batch = setup
    for r, s in enumerate(corpus.samples[:6]):
        exist, path_present, anat_abnormal = bank.labels(corpus.grammar, s.triplets)
        assert torch.equal(batch.exist[r], torch.tensor(exist, dtype=torch.float32))
        assert torch.equal(batch.path_present[r], torch.tensor(path_present, dtype=torch.long))
        assert vocab.decode(batch.tokens[r].tolist()) == s.report
