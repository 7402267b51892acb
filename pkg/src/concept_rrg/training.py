"""Combined objective, optimization loop and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import alignment_loss
from .concept_bank import ConceptBank
from .corpus import Corpus, Vocabulary
from .enhancement import contrastive_loss, matching_loss
from .errors import ConfigError, DataError
from .evaluation.metrics import ce_metrics
from .generator import generation_loss
from .model import Batch, ConceptReportModel, TrainConfig, make_batch, predict_reports, save_checkpoint

__all__ = ["total_loss", "train", "TrainResult", "validate", "COMPONENTS", "recombine"]

log = logging.getLogger(__name__)

COMPONENTS = ("anat_cls", "path_cls", "contrastive", "matching", "generation")


def recombine(c: dict, concept_weight: float, aux_weight: float):
    return concept_weight * (c["anat_cls"] + c["path_cls"]) + aux_weight * (c["matching"] + c["contrastive"]) + c["generation"]


def total_loss(model: ConceptReportModel, batch: Batch, config: TrainConfig | None = None):
    """Weighted objective and its five components, each a batch mean.

    Components are carried in double precision so the returned total is
    exactly their weighted recombination.
    """
    cfg = config or model.cfg
    if cfg.use_cl and len(batch) < 2:
        raise ConfigError("the contrastive loss needs at least two samples per batch")
    fb = model.features(batch.images)
    al = fb.alignment
    zero = torch.zeros((), dtype=torch.float64)
    comps = dict.fromkeys(COMPONENTS, zero)
    if cfg.use_bce:
        la, lp = alignment_loss(al.logits_a, batch.anat_abnormal, al.logits_p, batch.path_present)
        comps["anat_cls"], comps["path_cls"] = la.mean().double(), lp.mean().double()
    if cfg.use_cl:
        partner = fb.anat_contrast.roll(-1, dims=0)
        comps["contrastive"] = contrastive_loss(fb.anat_contrast, partner, cfg.temperature).mean().double()
    if cfg.use_m:
        comps["matching"] = matching_loss(fb.path_feats, fb.anat_feats, batch.exist, batch.path_present).mean().double()
    comps["generation"] = generation_loss(fb.gated_path, fb.gated_anat, batch.tokens, model.generator, cfg.rg_reduction).mean().double()
    return recombine(comps, cfg.concept_weight, cfg.aux_weight), comps


def _trim(batch: Batch, pad_id: int) -> Batch:
    used = int((batch.tokens != pad_id).sum(dim=1).max())
    batch.tokens = batch.tokens[:, :used]
    return batch


@torch.no_grad()
def validate(model: ConceptReportModel, batch: Batch, corpus: Corpus, samples) -> dict:
    model.eval()
    fb = model.features(batch.images)
    rg = generation_loss(fb.gated_path, fb.gated_anat, batch.tokens, model.generator, "sum").mean()
    reports = predict_reports(model, batch.images, beam_size=1)
    ce = ce_metrics(reports, [s.triplets for s in samples], corpus.grammar, model.bank)
    return {
        "val_generation": float(rg),
        "val_macro_F1": ce.macro["F1"],
        "val_example_F1": ce.example["F1"],
    }


@dataclass
class TrainResult:
    model: ConceptReportModel
    best_state: dict
    best_metric: float
    log: list = field(default_factory=list)
    step: int = 0

    def best_model(self) -> ConceptReportModel:
        m = copy.deepcopy(self.model)
        m.load_state_dict(self.best_state)
        m.eval()
        return m


def train(
    config: TrainConfig,
    corpus: Corpus,
    bank: ConceptBank,
    out_dir=None,
    validate_every_epoch: bool = True,
    max_steps: int | None = None,
) -> TrainResult:
    """Optimize the combined objective; deterministic for a fixed config.

    The seed fixes initialization, epoch shuffles and therefore the
    contrastive pairing (each sample is paired with its successor in the
    shuffled batch).  Keeps the best state by validation macro F1.
    """
    if bank.vocab_hash != corpus.grammar_hash:
        raise DataError(f"bank hash {bank.vocab_hash} does not match corpus grammar {corpus.grammar_hash}")
    torch.manual_seed(config.seed)
    vocab = Vocabulary.from_grammar(corpus.grammar)
    model = ConceptReportModel(bank, vocab, config, corpus.grammar.image_size)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    data_rng = np.random.default_rng([config.seed, 7919])

    train_samples = corpus.split("train")
    val_samples = corpus.split("val")[: config.val_limit]
    train_b = make_batch(train_samples, bank, corpus.grammar, vocab)
    val_b = make_batch(val_samples, bank, corpus.grammar, vocab) if val_samples else None

    records = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        log_file = open(out / "metrics.jsonl", "w")
    else:
        log_file = None

    def emit(rec):
        records.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()

    step = 0
    best_metric, best_state = -1.0, copy.deepcopy(model.state_dict())
    if val_b is not None and validate_every_epoch:
        v = validate(model, val_b, corpus, val_samples)
        emit({"step": 0, "epoch": 0, **v})
        best_metric = v["val_macro_F1"]

    n = len(train_samples)
    try:
        for epoch in range(config.epochs):
            perm = data_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = perm[start : start + config.batch_size]
                if config.use_cl and len(idx) < 2:
                    continue
                batch = _trim(train_b.index(idx), vocab.pad_id)
                model.train()
                loss, comps = total_loss(model, batch, config)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                emit({"step": step, "epoch": epoch, "loss": loss.item(), **{k: float(v.detach()) for k, v in comps.items()}})
                if max_steps is not None and step >= max_steps:
                    break
            if val_b is not None and validate_every_epoch:
                v = validate(model, val_b, corpus, val_samples)
                emit({"step": step, "epoch": epoch + 1, **v})
                log.info("epoch %d step %d %s", epoch + 1, step, v)
                if v["val_macro_F1"] >= best_metric:
                    best_metric, best_state = v["val_macro_F1"], copy.deepcopy(model.state_dict())
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_file is not None:
            log_file.close()

    if not validate_every_epoch or val_b is None:
        best_state = copy.deepcopy(model.state_dict())
    result = TrainResult(model=model, best_state=best_state, best_metric=best_metric, log=records, step=step)
    if out is not None:
        rng_state = {"torch": torch.get_rng_state(), "numpy": data_rng.bit_generator.state}
        extra = {"corpus_dir": str(Path(corpus.root).resolve()), "best_val_macro_F1": best_metric}
        save_checkpoint(out / "last.pt", model, corpus.grammar, opt, step, rng_state, extra)
        save_checkpoint(out / "best.pt", result.best_model(), corpus.grammar, None, step, rng_state, extra)
    return result
