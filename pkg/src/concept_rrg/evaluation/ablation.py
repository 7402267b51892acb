"""Ablation grid runner and table formatting."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError

__all__ = ["NLG_KEYS", "DEFAULT_GRID", "AblationRun", "AblationTable", "avg_delta", "run_ablation_suite"]

log = logging.getLogger(__name__)

NLG_KEYS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l")

_OFF = dict(use_bce=False, use_cl=False, use_m=False, use_fg=False)

DEFAULT_GRID: dict[str, dict] = {
    "baseline": dict(_OFF),
    "bce": {**_OFF, "use_bce": True},
    "bce+cl": {**_OFF, "use_bce": True, "use_cl": True},
    "bce+m": {**_OFF, "use_bce": True, "use_m": True},
    "bce+cl+m": {**_OFF, "use_bce": True, "use_cl": True, "use_m": True},
    "full": dict(use_bce=True, use_cl=True, use_m=True, use_fg=True),
}


def avg_delta(row: Mapping[str, float], baseline: Mapping[str, float], keys: Sequence[str] = NLG_KEYS) -> float:
    """Mean relative improvement of ``row`` over ``baseline`` across ``keys``."""
    deltas = []
    for k in keys:
        if baseline[k] == 0:
            raise ZeroDivisionError(f"baseline {k} is 0; relative improvement undefined")
        deltas.append(row[k] / baseline[k] - 1.0)
    return float(np.mean(deltas))


@dataclass
class AblationRun:
    name: str
    seed: int
    flags: dict
    metrics: dict  # NLG keys plus macro_F1, example_F1
    best_val_macro_F1: float
    extra: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    runs: list[AblationRun]
    baseline: str | None = "baseline"
    models: dict = field(default_factory=dict, repr=False)  # (name, seed) -> model, not serialized

    def names(self) -> list[str]:
        return list(dict.fromkeys(r.name for r in self.runs))

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.runs})

    def get(self, name: str, seed: int) -> AblationRun:
        for r in self.runs:
            if r.name == name and r.seed == seed:
                return r
        raise KeyError((name, seed))

    def metric(self, name: str, key: str) -> dict[int, float]:
        return {r.seed: r.metrics[key] for r in self.runs if r.name == name}

    def delta(self, name: str, seed: int) -> float | None:
        """Relative NLG improvement over the baseline row at the same seed.

        ``None`` without a baseline row or when a baseline metric is 0.
        """
        if self.baseline is None or self.baseline not in self.names():
            return None
        try:
            return avg_delta(self.get(name, seed).metrics, self.get(self.baseline, seed).metrics)
        except ZeroDivisionError:
            return None

    def summary(self) -> list[dict]:
        rows = []
        for name in self.names():
            runs = [r for r in self.runs if r.name == name]
            row = {"name": name, "flags": runs[0].flags, "n_seeds": len(runs)}
            for k in (*NLG_KEYS, "macro_F1", "example_F1"):
                row[k] = float(np.mean([r.metrics[k] for r in runs]))
            deltas = [d for d in (self.delta(name, r.seed) for r in runs) if d is not None]
            row["avg_delta"] = float(np.mean(deltas)) if deltas else None
            rows.append(row)
        return rows

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "runs": [asdict(r) for r in self.runs], "summary": self.summary()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def format(self, per_seed: bool = False) -> str:
        flags = ("use_bce", "use_cl", "use_m", "use_fg")
        head = ["bce", "cl", "m", "fg", "BL-1", "BL-2", "BL-3", "BL-4", "RG-L", "AVG.D", "F1", "name"]
        lines = ["  ".join(f"{h:>6}" for h in head[:-1]) + "  name"]

        def line(flag_map, m, delta, name, label):
            cells = ["x" if flag_map.get(f) else "" for f in flags]
            cells += [f"{m[k]:.3f}" for k in NLG_KEYS]
            cells.append("-" if delta is None or name == self.baseline else f"{100 * delta:+.1f}%")
            cells.append(f"{m['macro_F1']:.3f}")
            return "  ".join(f"{c:>6}" for c in cells) + f"  {label}"

        for row in self.summary():
            lines.append(line(row["flags"], row, row["avg_delta"], row["name"], row["name"]))
            if per_seed:
                for r in (r for r in self.runs if r.name == row["name"]):
                    lines.append(line(r.flags, r.metrics, self.delta(r.name, r.seed), r.name, f"{r.name} seed={r.seed}"))
        return "\n".join(lines)


def run_ablation_suite(
    base_config,
    grid: Mapping[str, Mapping] | None,
    seeds: Sequence[int],
    corpus,
    bank,
    split: str = "test",
    beam_size: int = 1,
    out_dir=None,
    baseline: str | None = "baseline",
    keep_models: bool = False,
) -> AblationTable:
    """Train every grid entry at every seed and score its best checkpoint on ``split``.

    ``grid`` maps row names to config overrides applied on top of
    ``base_config``; ``None`` selects the six standard rows.  With
    ``out_dir`` each run writes its checkpoints under ``<name>/seed<k>``.
    """
    from ..training import train
    from .analysis import evaluate_model

    grid = DEFAULT_GRID if grid is None else grid
    if not grid or not seeds:
        raise ConfigError("ablation grid and seed list must be nonempty")
    if baseline is not None and baseline not in grid:
        baseline = None
    samples = corpus.split(split)
    runs, models = [], {}
    for name, overrides in grid.items():
        for seed in seeds:
            cfg = base_config.replace(**overrides, seed=int(seed))
            run_dir = Path(out_dir) / name / f"seed{seed}" if out_dir is not None else None
            t0 = time.perf_counter()
            result = train(cfg, corpus, bank, out_dir=run_dir)
            seconds = time.perf_counter() - t0
            model = result.best_model()
            report, _ = evaluate_model(model, samples, corpus.grammar, beam_size=beam_size)
            metrics = {k: getattr(report, k) for k in NLG_KEYS}
            metrics["macro_F1"] = report.ce_macro["F1"]
            metrics["example_F1"] = report.ce_example["F1"]
            flags = {k: getattr(cfg, k) for k in ("use_bce", "use_cl", "use_m", "use_fg")}
            val_rg = [r["val_generation"] for r in result.log if "val_generation" in r]
            extra = {"train_seconds": seconds, "val_generation": val_rg}
            run = AblationRun(name, int(seed), flags, metrics, result.best_metric, extra)
            if keep_models:
                models[(name, int(seed))] = model
            runs.append(run)
            log.info("ablation %s seed %d macro F1 %.3f", name, seed, metrics["macro_F1"])
    table = AblationTable(runs, baseline, models)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.save(out / "ablation.json")
        (out / "ablation.txt").write_text(table.format(per_seed=True) + "\n")
    return table
