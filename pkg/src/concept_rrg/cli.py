"""Command line front end: ``concept-rrg <subcommand> ...``.

Exit codes: 0 on success, 1 on a runtime failure (printed with its
category: config, data, numerical or io), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import PipelineError

CONFIG_DIR_ENV = "CONCEPT_RRG_CONFIG_DIR"

log = logging.getLogger("concept_rrg")


class UsageError(Exception):
    pass


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve_config(path: str | None, command: str) -> Path | None:
    """An explicit path, else the same name under the config directory, else ``<command>.json`` there."""
    base = os.environ.get(CONFIG_DIR_ENV)
    if path is not None:
        p = Path(path)
        if p.exists() or p.is_absolute() or base is None:
            return p
        return Path(base) / p
    if base is not None and (Path(base) / f"{command}.json").exists():
        return Path(base) / f"{command}.json"
    return None


def _resolved_record(args, **extra) -> dict:
    rec = {k: v for k, v in vars(args).items() if k != "func"}
    rec.update(extra)
    return rec


def _sidecar(out: Path) -> Path:
    return out.with_name(out.stem + ".resolved.json")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .corpus import GrammarSpec, default_grammar, write_corpus

    cfg = _resolve_config(args.config, "gen-data")
    grammar = GrammarSpec.from_dict(json.loads(cfg.read_text())) if cfg is not None else default_grammar()
    manifest = write_corpus(grammar, args.n, args.seed, args.out)
    _dump(_resolved_record(args, config=str(cfg) if cfg else None, grammar_hash=manifest["grammar_hash"]),
          Path(args.out) / "gen-data.resolved.json")
    print(f"wrote {args.n} samples to {args.out} (grammar {manifest['grammar_hash']})")
    return 0


def cmd_build_bank(args) -> int:
    from .concept_bank import build_bank, load_descriptions
    from .corpus import load_corpus

    corpus = load_corpus(args.corpus)
    bank = build_bank(corpus, load_descriptions(args.desc), min_frequency=args.min_freq)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(out)
    _dump(_resolved_record(args), _sidecar(out))
    print(f"bank: {bank.n_pathology} pathologies, {bank.n_anatomy} anatomies -> {out}")
    return 0


_FLAG_OVERRIDES = ("seed", "epochs", "batch_size", "lr", "concept_weight", "aux_weight", "max_len", "beam_size", "corpus", "bank")


def _train_config(args):
    from .model import TrainConfig

    cfg_path = _resolve_config(args.config, "train")
    d = json.loads(cfg_path.read_text()) if cfg_path is not None else {}
    for k in _FLAG_OVERRIDES:
        v = getattr(args, k, None)
        if v is not None:
            d[k] = v
    for flag in ("bce", "cl", "m", "fg"):
        if getattr(args, f"no_{flag}", False):
            d[f"use_{flag}"] = False
    cfg = TrainConfig.from_dict(d)
    if cfg_path is not None:
        # relative data paths in a config file are taken relative to that file
        for k in ("corpus", "bank"):
            v = getattr(cfg, k)
            if v is not None and getattr(args, k, None) is None and not Path(v).is_absolute():
                cfg = cfg.replace(**{k: str((cfg_path.parent / v).resolve())})
    if cfg.corpus is None or cfg.bank is None:
        raise UsageError("train needs a corpus and a bank (flags or config file)")
    return cfg


def cmd_train(args) -> int:
    from .concept_bank import ConceptBank
    from .corpus import load_corpus
    from .training import train

    cfg = _train_config(args)
    corpus = load_corpus(cfg.corpus)
    bank = ConceptBank.load(cfg.bank)
    result = train(cfg, corpus, bank, out_dir=args.out, max_steps=args.max_steps)
    print(f"trained {result.step} steps; best validation macro F1 {result.best_metric:.4f}; checkpoints in {args.out}")
    return 0


def _load(checkpoint):
    from .model import load_checkpoint

    return load_checkpoint(checkpoint)


def _corpus_for(ckpt: dict, corpus_arg: str | None):
    from .corpus import grammar_hash, load_corpus
    from .errors import DataError

    path = corpus_arg or ckpt.get("extra", {}).get("corpus_dir")
    if path is None:
        raise UsageError("no corpus given and the checkpoint does not record one")
    corpus = load_corpus(path)
    if corpus.grammar_hash != ckpt["bank"]["vocab_hash"]:
        raise DataError(f"corpus grammar {corpus.grammar_hash} does not match the checkpoint bank")
    return corpus


def cmd_eval(args) -> int:
    from .evaluation.analysis import attention_localization, evaluate_model

    model, ckpt = _load(args.checkpoint)
    corpus = _corpus_for(ckpt, args.corpus)
    samples = corpus.split(args.split)
    if args.limit is not None:
        samples = samples[: args.limit]
    report, generated = evaluate_model(model, samples, corpus.grammar, beam_size=args.beam)
    report.analysis["localization"] = attention_localization(model, samples, corpus.grammar)
    out = Path(args.out)
    _dump(report.to_dict(), out)
    if args.dump_reports:
        _dump([{"id": s.id, "generated": " ".join(g), "reference": s.report_text} for s, g in zip(samples, generated)],
              out.with_name(out.stem + ".reports.json"))
    _dump(_resolved_record(args, corpus=str(corpus.root)), _sidecar(out))
    print(
        f"BLEU-4 {report.bleu_4:.4f}  ROUGE-L {report.rouge_l:.4f}  "
        f"macro F1 {report.ce_macro['F1']:.4f}  example F1 {report.ce_example['F1']:.4f}"
    )
    return 0


def _input_image(args, ckpt):
    from .corpus import read_pgm

    src = args.input
    if Path(src).is_file():
        img = read_pgm(Path(src))
        return img, None
    try:
        sample_id = int(src)
    except ValueError:
        raise UsageError(f"--input {src!r} is neither an image file nor a sample id") from None
    corpus = _corpus_for(ckpt, args.corpus)
    s = corpus.by_id(sample_id)
    return s.image, s


def cmd_generate(args) -> int:
    import torch

    from .generator import decode, step_topk

    model, ckpt = _load(args.checkpoint)
    image, sample = _input_image(args, ckpt)
    if tuple(image.shape) != tuple(model.image_size):
        raise PipelineError(f"image of shape {image.shape} does not match the model's {model.image_size}")
    with torch.no_grad():
        fb = model.features(torch.tensor(image, dtype=torch.float32).unsqueeze(0))
        tokens = decode(fb.gated_path[0], fb.gated_anat[0], model.generator, beam_size=args.beam)
        steps = step_topk(fb.gated_path[0], fb.gated_anat[0], tokens, model.generator, k=args.topk)
    words = model.vocab.decode(tokens)
    for st in steps:
        st["chosen_token"] = model.vocab.itos[st["chosen"]]
        st["top"] = [[model.vocab.itos[i], lp] for i, lp in st["top"]]
    print(" ".join(words))
    if args.out is not None:
        out = Path(args.out)
        _dump(
            {
                "input": args.input,
                "report": " ".join(words),
                "reference": sample.report_text if sample is not None else None,
                "beam": args.beam,
                "steps": steps,
            },
            out,
        )
        _dump(_resolved_record(args), _sidecar(out))
    return 0


def _heatmap(values: np.ndarray, grid, patch: int) -> np.ndarray:
    """Upsample a token distribution to image resolution, scaled to [0, 1] by its max."""
    m = values.reshape(grid)
    m = m / m.max() if m.max() > 0 else m
    return np.kron(m, np.ones((patch, patch)))


def cmd_inspect_attn(args) -> int:
    import torch

    from .corpus import write_pgm

    model, ckpt = _load(args.checkpoint)
    corpus = _corpus_for(ckpt, args.corpus)
    s = corpus.by_id(args.sample)
    with torch.no_grad():
        fb = model.features(torch.tensor(s.image, dtype=torch.float32).unsqueeze(0))
    al = fb.alignment
    attn_p = al.attn_p[0].double().numpy()  # [L, h, n_p, N]
    attn_a = al.attn_a[0].double().numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid, patch = model.encoder.grid_shape, model.encoder.patch_size
    write_pgm(out / "image.pgm", s.image)
    for kind, names, attn in (("pathology", model.bank.pathology_names, attn_p), ("anatomy", model.bank.anatomy_names, attn_a)):
        for k, name in enumerate(names):
            heat = _heatmap(attn[-1, :, k].mean(axis=0), grid, patch)
            write_pgm(out / f"{kind}_{k:02d}_{name.replace(' ', '_')}.pgm", heat)
    np.savez(
        out / "attention.npz",
        attn_p=attn_p,
        attn_a=attn_a,
        entropy_p=fb.gates.pathology.entropies[0].double().numpy(),
        entropy_a=fb.gates.anatomy.entropies[0].double().numpy(),
        grid_shape=np.array(grid),
        patch_size=patch,
    )
    gates = {
        "sample": s.id,
        "report": s.report_text,
        "present": [[corpus.grammar.pathology_names[i], corpus.grammar.anatomy_names[j]] for i, j in s.triplets.present()],
        "pathology": dict(zip(model.bank.pathology_names, fb.gates.pathology.gates[0].tolist())),
        "anatomy": dict(zip(model.bank.anatomy_names, fb.gates.anatomy.gates[0].tolist())),
        "logits_p": dict(zip(model.bank.pathology_names, fb.alignment.logits_p[0].tolist())),
    }
    _dump(gates, out / "gates.json")
    _dump(_resolved_record(args, corpus=str(corpus.root)), out / "inspect-attn.resolved.json")
    print(f"wrote attention maps for sample {s.id} to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .concept_bank import ConceptBank
    from .corpus import load_corpus
    from .evaluation.ablation import DEFAULT_GRID, run_ablation_suite

    cfg = _train_config(args)
    corpus = load_corpus(cfg.corpus)
    bank = ConceptBank.load(cfg.bank)
    grid = DEFAULT_GRID
    if args.rows:
        unknown = [r for r in args.rows if r not in DEFAULT_GRID]
        if unknown:
            raise UsageError(f"unknown ablation rows {unknown}; choose from {list(DEFAULT_GRID)}")
        grid = {r: DEFAULT_GRID[r] for r in args.rows}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump({"config": cfg.to_dict(), "grid": grid, "seeds": args.seeds}, out / "ablate.resolved.json")
    table = run_ablation_suite(cfg, grid, args.seeds, corpus, bank, split=args.split, beam_size=args.beam, out_dir=out)
    print(table.format(per_seed=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    p.add_argument("--config", help=f"training config JSON (looked up in ${CONFIG_DIR_ENV} if relative and absent)")
    p.add_argument("--corpus", help="corpus directory (overrides the config)")
    p.add_argument("--bank", help="concept bank file (overrides the config)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="batch size")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--concept-weight", dest="concept_weight", type=float, help="weight of the two concept classification losses")
    p.add_argument("--aux-weight", dest="aux_weight", type=float, help="weight of the contrastive and matching losses")
    p.add_argument("--max-len", dest="max_len", type=int, help="longest report in tokens")
    p.add_argument("--beam-size", dest="beam_size", type=int, help="decoding beam width stored in the config")
    for flag, what in (("bce", "concept classification"), ("cl", "contrastive"), ("m", "matching")):
        p.add_argument(f"--no-{flag}", action="store_true", help=f"disable the {what} loss")
    p.add_argument("--no-fg", action="store_true", help="disable entropy feature gating")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="concept-rrg", description="Concept-aligned report generation on a synthetic corpus.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="grammar JSON (default: built-in grammar)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=2000, help="number of samples (default 2000)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default 0)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-bank", help="build the concept bank from corpus reports")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--desc", help="descriptions JSON mapping concept name to text (default: packaged file)")
    p.add_argument("--min-freq", dest="min_freq", type=int, default=1, help="minimum mention count (default 1)")
    p.add_argument("--out", required=True, help="bank file to write")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", help="corpus directory (default: the one recorded in the checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split (default test)")
    p.add_argument("--beam", type=int, default=1, help="beam width; 1 is greedy (default 1)")
    p.add_argument("--limit", type=int, help="score only the first N samples")
    p.add_argument("--dump-reports", action="store_true", help="also write generated reports next to the output")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="generate one report")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="sample id in the corpus, or a PGM image file")
    p.add_argument("--corpus", help="corpus directory for sample ids (default: the one recorded in the checkpoint)")
    p.add_argument("--beam", type=int, default=3, help="beam width (default 3)")
    p.add_argument("--topk", type=int, default=5, help="alternatives per step in the sidecar (default 5)")
    p.add_argument("--out", help="sidecar JSON with per-step top-k log-probabilities")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inspect-attn", help="export attention maps and gates for one sample")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--sample", type=int, required=True, help="sample id")
    p.add_argument("--corpus", help="corpus directory (default: the one recorded in the checkpoint)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _add_train_flags(p)
    p.add_argument("--rows", nargs="+", help="subset of grid rows (default: all six)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="seeds (default 0..4)")
    p.add_argument("--split", default="test", choices=("val", "test"), help="scored split (default test)")
    p.add_argument("--beam", type=int, default=1, help="beam width for scoring (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except PipelineError as e:
        print(f"error [{e.category}]: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error [io]: {e}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError) as e:
        category = "numerical" if isinstance(e, ArithmeticError) else "data"
        print(f"error [{category}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
