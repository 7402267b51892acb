"""Synthetic radiograph/report corpus with an exact report parser.

Images are small grayscale grids with one rectangular region per anatomy.
Every present finding plants a bright lesion inside its anatomy's region and
adds a sentence to the report.  Because the report grammar is closed, a
report can be parsed back to its finding matrix exactly, which makes the
parser usable both as a triplet extractor and as a clinical labeler.

Example
-------

>>> g = default_grammar()
>>> s = generate_sample(g, seed=3)
>>> parse_report(g, s.report) == s.triplets
True
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, ParseError

__all__ = [
    "GrammarSpec",
    "TripletSet",
    "Sample",
    "Vocabulary",
    "Corpus",
    "default_grammar",
    "generate_sample",
    "parse_report",
    "parse_report_lenient",
    "concept_mentions",
    "write_corpus",
    "load_corpus",
    "grammar_hash",
    "sample_seed",
    "read_pgm",
    "write_pgm",
    "rle_encode",
    "rle_decode",
]

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
FORMAT_VERSION = 1

_LESION_KINDS = ("blob", "streak", "ring", "cross", "disk")


@dataclass(frozen=True)
class GrammarSpec:
    """Closed report grammar plus the image layout it is paired with.

    ``region_boxes`` are ``(row0, col0, row1, col1)`` half-open pixel
    rectangles, one per anatomy.  ``compatibility[i]`` lists the anatomy
    indices where pathology ``i`` can occur and ``prevalence[i]`` is the
    probability of it occurring at each of them.  ``lesion_styles[i]`` is
    ``(kind, size_rows, size_cols)``.
    """

    anatomy_names: tuple[str, ...]
    pathology_names: tuple[str, ...]
    region_boxes: tuple[tuple[int, int, int, int], ...]
    compatibility: tuple[tuple[int, ...], ...]
    prevalence: tuple[float, ...]
    lesion_styles: tuple[tuple[str, float, float], ...]
    image_size: tuple[int, int] = (64, 64)
    positive_templates: tuple[str, ...] = (
        "{pathology} is seen in the {anatomy} .",
        "there is {pathology} in the {anatomy} .",
    )
    negative_templates: tuple[str, ...] = ("there is no {pathology} .",)
    normal_templates: tuple[str, ...] = ("the {anatomy} is normal .",)
    healthy_sentence: str = "no acute findings ."
    max_per_anatomy: int = 2
    negatives_range: tuple[int, int] = (1, 3)
    normals_range: tuple[int, int] = (0, 1)
    lesion_amplitude: float = 0.5

    @property
    def n_anatomy(self) -> int:
        return len(self.anatomy_names)

    @property
    def n_pathology(self) -> int:
        return len(self.pathology_names)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "GrammarSpec":
        def tup(x):
            return tuple(tup(v) for v in x) if isinstance(x, list) else x

        try:
            g = cls(**{k: tup(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(f"bad grammar fields: {exc}") from None
        g.validate()
        return g

    def template_words(self) -> set[str]:
        words = set()
        for t in (
            self.positive_templates
            + self.negative_templates
            + self.normal_templates
            + (self.healthy_sentence,)
        ):
            words.update(w for w in t.split() if not w.startswith("{"))
        return words

    def vocabulary(self) -> list[str]:
        words = self.template_words()
        for name in self.anatomy_names + self.pathology_names:
            words.update(name.split())
        return sorted(words)

    def validate(self) -> None:
        H, W = self.image_size
        na, npth = self.n_anatomy, self.n_pathology
        if na < 1 or npth < 1:
            raise ConfigError("grammar needs at least one anatomy and one pathology")
        for names, kind in ((self.anatomy_names, "anatomy"), (self.pathology_names, "pathology")):
            if len(set(names)) != len(names):
                raise ConfigError(f"duplicate {kind} names")
        if len(self.region_boxes) != na:
            raise ConfigError("every anatomy needs exactly one region box")
        for name, (r0, c0, r1, c1) in zip(self.anatomy_names, self.region_boxes):
            if not (0 <= r0 < r1 <= H and 0 <= c0 < c1 <= W):
                raise ConfigError(f"region box of {name!r} is empty or outside the image")
        for field_name in ("compatibility", "prevalence", "lesion_styles"):
            if len(getattr(self, field_name)) != npth:
                raise ConfigError(f"{field_name} needs one entry per pathology")
        for name, allowed in zip(self.pathology_names, self.compatibility):
            if not allowed or any(not 0 <= j < na for j in allowed):
                raise ConfigError(f"compatibility of {name!r} references unknown anatomies")
        if any(not 0.0 <= p <= 1.0 for p in self.prevalence):
            raise ConfigError("prevalence values must lie in [0, 1]")
        for kind, *_ in self.lesion_styles:
            if kind not in _LESION_KINDS:
                raise ConfigError(f"unknown lesion kind {kind!r}")
        reserved = self.template_words()
        for name in self.anatomy_names + self.pathology_names:
            clash = reserved.intersection(name.split())
            if clash or not name.strip():
                raise ConfigError(f"concept name {name!r} reuses template words {sorted(clash)}")
        for t in self.positive_templates:
            if "{pathology}" not in t or "{anatomy}" not in t:
                raise ConfigError(f"positive template {t!r} needs both placeholders")
        for t in self.negative_templates:
            if "{pathology}" not in t:
                raise ConfigError(f"negative template {t!r} needs a pathology placeholder")
        for t in self.normal_templates:
            if "{anatomy}" not in t:
                raise ConfigError(f"normal template {t!r} needs an anatomy placeholder")
        for t in self.positive_templates + self.negative_templates + self.normal_templates + (
            self.healthy_sentence,
        ):
            if not t.endswith(" .") or t.count(".") != 1:
                raise ConfigError(f"template {t!r} must end with a single ' .'")
        if not 1 <= self.max_per_anatomy:
            raise ConfigError("max_per_anatomy must be >= 1")
        lo, hi = self.negatives_range
        if not 0 <= lo <= hi:
            raise ConfigError("negatives_range must satisfy 0 <= lo <= hi")
        lo, hi = self.normals_range
        if not 0 <= lo <= hi:
            raise ConfigError("normals_range must satisfy 0 <= lo <= hi")


def default_grammar() -> GrammarSpec:
    """Eight anatomies and ten pathologies on a 64x64 canvas."""
    anatomies = (
        "right upper lung",
        "right lower lung",
        "left upper lung",
        "left lower lung",
        "heart",
        "mediastinum",
        "right costophrenic angle",
        "left costophrenic angle",
    )
    boxes = (
        (4, 4, 28, 28),
        (28, 4, 52, 28),
        (4, 36, 28, 60),
        (28, 36, 52, 60),
        (32, 22, 56, 44),
        (4, 28, 32, 36),
        (50, 2, 62, 22),
        (50, 42, 62, 62),
    )
    lungs = (0, 1, 2, 3)
    table = [
        # name, compatible anatomies, lesion style
        ("opacity", lungs, ("blob", 3.0, 3.0)),
        ("pleural effusion", (1, 3, 6, 7), ("streak", 1.2, 4.5)),
        ("atelectasis", (1, 3), ("streak", 4.5, 1.2)),
        ("pneumonia", lungs, ("ring", 3.0, 0.9)),
        ("edema", lungs, ("cross", 3.5, 0.9)),
        ("nodule", lungs, ("blob", 1.8, 1.8)),
        ("pneumothorax", (0, 2), ("ring", 5.0, 0.8)),
        ("consolidation", (1, 3), ("blob", 4.5, 4.5)),
        ("cardiomegaly", (4,), ("blob", 4.0, 6.5)),
        ("mass", (0, 2, 5), ("disk", 3.0, 3.0)),
    ]
    return GrammarSpec(
        anatomy_names=anatomies,
        pathology_names=tuple(s[0] for s in table),
        region_boxes=boxes,
        compatibility=tuple(s[1] for s in table),
        # roughly 16% of samples show each pathology somewhere
        prevalence=tuple(round(0.16 / len(s[1]), 4) for s in table),
        lesion_styles=tuple(s[2] for s in table),
    )


def grammar_hash(grammar: GrammarSpec) -> str:
    blob = json.dumps(grammar.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TripletSet:
    """Presence matrix ``exist[i, j]`` of pathology ``i`` at anatomy ``j``."""

    exist: np.ndarray

    def __post_init__(self):
        self.exist = np.asarray(self.exist, dtype=np.uint8)
        if self.exist.ndim != 2 or not np.isin(self.exist, (0, 1)).all():
            raise DataError("exist must be a binary matrix")

    @property
    def path_present(self) -> np.ndarray:
        return self.exist.any(axis=1).astype(np.uint8)

    @property
    def anat_abnormal(self) -> np.ndarray:
        return self.exist.any(axis=0).astype(np.uint8)

    def present(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.exist))]

    def __eq__(self, other):
        if not isinstance(other, TripletSet):
            return NotImplemented
        return self.exist.shape == other.exist.shape and bool((self.exist == other.exist).all())

    @classmethod
    def empty(cls, n_pathology: int, n_anatomy: int) -> "TripletSet":
        return cls(np.zeros((n_pathology, n_anatomy), dtype=np.uint8))


@dataclass
class Sample:
    image: np.ndarray
    report: list[str]
    triplets: TripletSet
    lesion_masks: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    seed: int | None = None
    id: int | None = None

    @property
    def report_text(self) -> str:
        return " ".join(self.report)


class Vocabulary:
    """Token <-> id map: special tokens first, then sorted grammar words."""

    def __init__(self, words: Iterable[str]):
        self.itos = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    @classmethod
    def from_grammar(cls, grammar: GrammarSpec) -> "Vocabulary":
        return cls(grammar.vocabulary())

    def __len__(self):
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> list[int]:
        try:
            ids = [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise DataError(f"unknown token {exc.args[0]!r}") from None
        return ids + [self.eos_id] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            if i in (self.pad_id, self.bos_id):
                continue
            out.append(self.itos[i])
        return out


# ---------------------------------------------------------------------------
# Generation


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) % 2**64))


def sample_seed(corpus_seed: int, index: int) -> int:
    """Per-sample seed derived from a corpus seed; stable across runs."""
    ss = np.random.SeedSequence([int(corpus_seed) % 2**32, int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def _lesion_profile(kind, size_r, size_c, center, shape):
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    if kind == "blob":
        return np.exp(-0.5 * ((dr / size_r) ** 2 + (dc / size_c) ** 2))
    if kind == "streak":
        return np.exp(-0.5 * ((dr / size_r) ** 2 + (dc / size_c) ** 2))
    if kind == "ring":
        rad = np.hypot(dr, dc)
        return np.exp(-0.5 * ((rad - size_r) / size_c) ** 2)
    if kind == "cross":
        arm_h = np.exp(-0.5 * ((dr / size_c) ** 2 + (dc / size_r) ** 2))
        arm_v = np.exp(-0.5 * ((dr / size_r) ** 2 + (dc / size_c) ** 2))
        return np.maximum(arm_h, arm_v)
    if kind == "disk":
        return ((dr / size_r) ** 2 + (dc / size_c) ** 2 <= 1.0).astype(np.float64)
    raise ConfigError(f"unknown lesion kind {kind!r}")


def _anatomy_texture(j: int, box, shape) -> np.ndarray:
    r0, c0, r1, c1 = box
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    angle = j * np.pi / 8
    freq = 0.35 + 0.09 * j
    wave = np.sin(freq * (rr * np.cos(angle) + cc * np.sin(angle)))
    tex = np.zeros(shape)
    tex[r0:r1, c0:c1] = 0.12 + 0.02 * j + 0.03 * wave[r0:r1, c0:c1]
    return tex


def _draw_findings(grammar: GrammarSpec, rng: np.random.Generator) -> np.ndarray:
    exist = np.zeros((grammar.n_pathology, grammar.n_anatomy), dtype=np.uint8)
    for j in range(grammar.n_anatomy):
        hits = [
            i
            for i in range(grammar.n_pathology)
            if j in grammar.compatibility[i] and rng.random() < grammar.prevalence[i]
        ]
        if len(hits) > grammar.max_per_anatomy:
            hits = sorted(rng.choice(hits, size=grammar.max_per_anatomy, replace=False).tolist())
        exist[hits, j] = 1
    return exist


def _render_image(grammar: GrammarSpec, exist: np.ndarray, rng: np.random.Generator):
    shape = tuple(grammar.image_size)
    img = 0.15 + 0.35 * gaussian_filter(rng.normal(size=shape), sigma=3.0)
    for j, box in enumerate(grammar.region_boxes):
        img += _anatomy_texture(j, box, shape)
    masks = {}
    for i, j in zip(*np.nonzero(exist)):
        kind, sr, sc = grammar.lesion_styles[i]
        r0, c0, r1, c1 = grammar.region_boxes[j]
        reach = 2.0 * max(sr, sc)
        mr = min(reach, (r1 - r0) / 2 - 0.5)
        mc = min(reach, (c1 - c0) / 2 - 0.5)
        center = (rng.uniform(r0 + mr, r1 - mr - 1), rng.uniform(c0 + mc, c1 - mc - 1))
        box = np.zeros(shape, dtype=bool)
        box[r0:r1, c0:c1] = True
        prof = _lesion_profile(kind, sr, sc, center, shape) * box
        amp = grammar.lesion_amplitude * rng.uniform(0.85, 1.15)
        img += amp * prof
        mask = prof >= 0.5
        if not mask.any():
            mask[int(round(min(max(center[0], r0), r1 - 1))), int(round(min(max(center[1], c0), c1 - 1)))] = True
        masks[(int(i), int(j))] = mask
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, masks


def _write_report(grammar: GrammarSpec, exist: np.ndarray, rng: np.random.Generator) -> list[str]:
    sentences = []
    present = [(i, j) for j in range(grammar.n_anatomy) for i in range(grammar.n_pathology) if exist[i, j]]
    if not present:
        sentences.append(grammar.healthy_sentence)
    for i, j in present:
        t = grammar.positive_templates[rng.integers(len(grammar.positive_templates))]
        sentences.append(t.format(pathology=grammar.pathology_names[i], anatomy=grammar.anatomy_names[j]))
    healthy = [j for j in range(grammar.n_anatomy) if not exist[:, j].any()]
    lo, hi = grammar.normals_range
    k = min(int(rng.integers(lo, hi + 1)), len(healthy))
    for j in sorted(rng.choice(healthy, size=k, replace=False).tolist()) if k else []:
        t = grammar.normal_templates[rng.integers(len(grammar.normal_templates))]
        sentences.append(t.format(anatomy=grammar.anatomy_names[j]))
    absent = [i for i in range(grammar.n_pathology) if not exist[i].any()]
    lo, hi = grammar.negatives_range
    k = min(int(rng.integers(lo, hi + 1)), len(absent))
    for i in sorted(rng.choice(absent, size=k, replace=False).tolist()) if k else []:
        t = grammar.negative_templates[rng.integers(len(grammar.negative_templates))]
        sentences.append(t.format(pathology=grammar.pathology_names[i]))
    return " ".join(sentences).split()


def generate_sample(
    grammar: GrammarSpec,
    seed: int,
    findings: Iterable[tuple[int, int]] | None = None,
) -> Sample:
    """Deterministically generate one (image, report, triplets, masks) sample.

    ``findings`` optionally fixes the present (pathology, anatomy) pairs
    instead of drawing them from the prevalence model.
    """
    grammar.validate()
    rng = _rng(seed)
    if findings is None:
        exist = _draw_findings(grammar, rng)
    else:
        exist = np.zeros((grammar.n_pathology, grammar.n_anatomy), dtype=np.uint8)
        for i, j in findings:
            exist[i, j] = 1
    image, masks = _render_image(grammar, exist, rng)
    report = _write_report(grammar, exist, rng)
    return Sample(image=image, report=report, triplets=TripletSet(exist), lesion_masks=masks, seed=int(seed))


# ---------------------------------------------------------------------------
# Parsing


def _compile_templates(grammar: GrammarSpec):
    cached = _TEMPLATE_CACHE.get(id(grammar))
    if cached is not None and cached[0] is grammar:
        return cached[1]

    def alt(names):
        return "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))

    p_alt, a_alt = alt(grammar.pathology_names), alt(grammar.anatomy_names)

    def compile_one(t):
        parts = re.split(r"(\{pathology\}|\{anatomy\})", t)
        out = []
        for part in parts:
            if part == "{pathology}":
                out.append(f"(?P<pathology>{p_alt})")
            elif part == "{anatomy}":
                out.append(f"(?P<anatomy>{a_alt})")
            else:
                out.append(re.escape(part))
        return re.compile("".join(out))

    compiled = (
        [("positive", compile_one(t)) for t in grammar.positive_templates]
        + [("negative", compile_one(t)) for t in grammar.negative_templates]
        + [("normal", compile_one(t)) for t in grammar.normal_templates]
        + [("healthy", re.compile(re.escape(grammar.healthy_sentence)))]
    )
    _TEMPLATE_CACHE[id(grammar)] = (grammar, compiled)
    return compiled


_TEMPLATE_CACHE: dict[int, tuple] = {}


def _split_sentences(tokens: Sequence[str]) -> list[str]:
    sentences, cur = [], []
    for tok in tokens:
        cur.append(tok)
        if tok == ".":
            sentences.append(" ".join(cur))
            cur = []
    if cur:
        sentences.append(" ".join(cur))
    return sentences


def _parse_sentences(grammar: GrammarSpec, tokens: Sequence[str]):
    """Yield ``(index, sentence, kind, pathology_idx, anatomy_idx)``; kind None if unmatched."""
    p_index = {n: i for i, n in enumerate(grammar.pathology_names)}
    a_index = {n: j for j, n in enumerate(grammar.anatomy_names)}
    for k, sent in enumerate(_split_sentences(tokens)):
        for kind, rx in _compile_templates(grammar):
            m = rx.fullmatch(sent)
            if m:
                gd = m.groupdict()
                yield k, sent, kind, p_index.get(gd.get("pathology")), a_index.get(gd.get("anatomy"))
                break
        else:
            yield k, sent, None, None, None


def _as_tokens(report) -> list[str]:
    return report.split() if isinstance(report, str) else list(report)


def _triplets_from(grammar: GrammarSpec, parsed) -> TripletSet:
    exist = np.zeros((grammar.n_pathology, grammar.n_anatomy), dtype=np.uint8)
    # Explicit negatives only ever confirm zeros; a positive mention wins.
    for _, _, kind, i, j in parsed:
        if kind == "positive":
            exist[i, j] = 1
    return TripletSet(exist)


def parse_report(grammar: GrammarSpec, report) -> TripletSet:
    """Parse a report (string or token list) into its TripletSet.

    Raises :class:`ParseError` with the sentence index on the first sentence
    that matches no template.
    """
    parsed = list(_parse_sentences(grammar, _as_tokens(report)))
    for k, sent, kind, _, _ in parsed:
        if kind is None:
            raise ParseError(k, sent)
    return _triplets_from(grammar, parsed)


def parse_report_lenient(grammar: GrammarSpec, report) -> tuple[TripletSet, int]:
    """Like :func:`parse_report` but skips unmatched sentences and counts them."""
    parsed = list(_parse_sentences(grammar, _as_tokens(report)))
    bad = sum(1 for p in parsed if p[2] is None)
    return _triplets_from(grammar, [p for p in parsed if p[2] is not None]), bad


def concept_mentions(grammar: GrammarSpec, report) -> tuple[list[str], list[str]]:
    """Names of pathologies and anatomies mentioned by each sentence of a report."""
    paths, anats = [], []
    for k, sent, kind, i, j in _parse_sentences(grammar, _as_tokens(report)):
        if kind is None:
            raise ParseError(k, sent)
        if i is not None:
            paths.append(grammar.pathology_names[i])
        if j is not None:
            anats.append(grammar.anatomy_names[j])
    return paths, anats


# ---------------------------------------------------------------------------
# On-disk corpus


def write_pgm(path: Path, image: np.ndarray) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + arr.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    arr = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return arr.astype(np.float64) / maxval


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run-length code as flat ``[start, length, start, length, ...]``."""
    flat = np.concatenate([[0], np.asarray(mask, dtype=np.int8).ravel(), [0]])
    edges = np.flatnonzero(np.diff(flat))
    starts, ends = edges[0::2], edges[1::2]
    return np.stack([starts, ends - starts], axis=1).ravel().tolist()


def rle_decode(rle: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    for start, length in zip(rle[0::2], rle[1::2]):
        flat[start : start + length] = True
    return flat.reshape(shape)


def _split_bounds(n: int) -> dict[str, list[int]]:
    n_val = max(1, n // 10) if n >= 3 else 0
    n_test = max(1, n // 10) if n >= 3 else 0
    n_train = n - n_val - n_test
    return {
        "train": [0, n_train],
        "val": [n_train, n_train + n_val],
        "test": [n_train + n_val, n],
    }


def write_corpus(grammar: GrammarSpec, n_samples: int, seed: int, path) -> dict:
    """Write ``n_samples`` samples plus ``manifest.json`` under ``path``.

    Layout: ``grammar.json``, ``samples.jsonl`` (one record per sample),
    ``images/NNNNN.pgm``.  Splits are contiguous index ranges (80/10/10).
    """
    if n_samples <= 0:
        raise ConfigError("n_samples must be positive")
    grammar.validate()
    root = Path(path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        for idx in range(n_samples):
            s = generate_sample(grammar, sample_seed(seed, idx))
            img_rel = f"images/{idx:05d}.pgm"
            write_pgm(root / img_rel, s.image)
            rec = {
                "id": idx,
                "seed": s.seed,
                "image": img_rel,
                "report": s.report_text,
                "triplets": [
                    [grammar.pathology_names[i], grammar.anatomy_names[j], 1] for i, j in s.triplets.present()
                ],
                "masks": [
                    {
                        "pathology": grammar.pathology_names[i],
                        "anatomy": grammar.anatomy_names[j],
                        "rle": rle_encode(m),
                    }
                    for (i, j), m in sorted(s.lesion_masks.items())
                ],
            }
            lines.append(json.dumps(rec, sort_keys=True))
        (root / "samples.jsonl").write_text("\n".join(lines) + "\n")
        (root / "grammar.json").write_text(json.dumps(grammar.to_dict(), indent=2, sort_keys=True) + "\n")
        manifest = {
            "version": FORMAT_VERSION,
            "grammar_hash": grammar_hash(grammar),
            "seed": int(seed),
            "n_samples": int(n_samples),
            "splits": _split_bounds(n_samples),
            "records": "samples.jsonl",
            "grammar": "grammar.json",
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write corpus to {root}: {exc}") from exc
    return manifest


@dataclass
class Corpus:
    root: Path
    grammar: GrammarSpec
    manifest: dict
    samples: list[Sample]

    @property
    def grammar_hash(self) -> str:
        return self.manifest["grammar_hash"]

    def split(self, name: str) -> list[Sample]:
        lo, hi = self.manifest["splits"][name]
        return self.samples[lo:hi]

    def by_id(self, sample_id: int) -> Sample:
        if not 0 <= int(sample_id) < len(self.samples):
            raise DataError(f"no sample with id {sample_id} (corpus has {len(self.samples)})")
        return self.samples[int(sample_id)]


def load_corpus(path) -> Corpus:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        grammar = GrammarSpec.from_dict(json.loads((root / manifest["grammar"]).read_text()))
        raw = (root / manifest["records"]).read_text().splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"not a corpus directory: {exc.filename}") from None
    if grammar_hash(grammar) != manifest["grammar_hash"]:
        raise DataError("grammar file does not match the manifest hash")
    p_index = {n: i for i, n in enumerate(grammar.pathology_names)}
    a_index = {n: j for j, n in enumerate(grammar.anatomy_names)}
    shape = tuple(grammar.image_size)
    samples = []
    for line in raw:
        rec = json.loads(line)
        exist = np.zeros((grammar.n_pathology, grammar.n_anatomy), dtype=np.uint8)
        for p, a, v in rec["triplets"]:
            exist[p_index[p], a_index[a]] = v
        masks = {
            (p_index[m["pathology"]], a_index[m["anatomy"]]): rle_decode(m["rle"], shape) for m in rec["masks"]
        }
        samples.append(
            Sample(
                image=read_pgm(root / rec["image"]),
                report=rec["report"].split(),
                triplets=TripletSet(exist),
                lesion_masks=masks,
                seed=rec["seed"],
                id=rec["id"],
            )
        )
    return Corpus(root=root, grammar=grammar, manifest=manifest, samples=samples)
