from .ablation import DEFAULT_GRID, NLG_KEYS, AblationRun, AblationTable, avg_delta, run_ablation_suite
from .analysis import (
    EvalReport,
    attention_localization,
    centroid_similarity,
    evaluate_model,
    gate_statistics,
    interclass_distance,
    localization_score,
    make_class_subset,
    patch_coverage,
)
from .metrics import CEResult, bleu, ce_from_labels, ce_metrics, corpus_bleu, lcs_length, rouge_l

__all__ = [
    "AblationRun",
    "AblationTable",
    "CEResult",
    "DEFAULT_GRID",
    "EvalReport",
    "NLG_KEYS",
    "attention_localization",
    "avg_delta",
    "bleu",
    "ce_from_labels",
    "ce_metrics",
    "centroid_similarity",
    "corpus_bleu",
    "evaluate_model",
    "gate_statistics",
    "interclass_distance",
    "lcs_length",
    "localization_score",
    "make_class_subset",
    "patch_coverage",
    "rouge_l",
    "run_ablation_suite",
]
