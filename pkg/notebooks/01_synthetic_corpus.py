# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # A synthetic chest film corpus
#
# Every sample is a 64x64 grayscale image with bright lesions planted inside
# anatomical boxes, plus a templated report describing exactly those findings.
# Because the report grammar is closed, a deterministic parser recovers the
# ground-truth (pathology, anatomy, exist) triplets from any report text. That
# parser doubles as the clinical labeler when we score generated reports.

# %%
import tempfile

import numpy as np

from concept_rrg.concept_bank import build_bank, count_concepts, load_descriptions
from concept_rrg.corpus import default_grammar, generate_sample, load_corpus, parse_report, write_corpus

grammar = default_grammar()
print(len(grammar.pathology_names), "pathologies,", len(grammar.anatomy_names), "anatomies")

# %% [markdown]
# ## One sample
#
# The seed fixes everything: image noise, which findings are present, their
# locations and the sentence templates.

# %%
sample = next(generate_sample(grammar, s) for s in range(50) if generate_sample(grammar, s).triplets.exist.sum() >= 2)
print(sample.report_text)
print("present:", [(grammar.pathology_names[i], grammar.anatomy_names[j]) for i, j in sample.triplets.present()])


# %%
def ascii_image(img, step=4):
    shades = " .:-=+*#%@"
    rows = img[::step, ::step]
    return "\n".join("".join(shades[min(int(v * len(shades)), len(shades) - 1)] for v in row) for row in rows)


print(ascii_image(sample.image))

# %% [markdown]
# The parser round-trips the report back to the same triplets.

# %%
assert parse_report(grammar, sample.report) == sample.triplets
print(parse_report(grammar, "there is no mass . cardiomegaly is seen in the heart .").present())

# %% [markdown]
# ## Writing and reloading a corpus
#
# `write_corpus` stores PGM images, run-length encoded lesion masks and a
# manifest with split boundaries and a grammar hash.

# %%
root = tempfile.mkdtemp()
manifest = write_corpus(grammar, 200, seed=0, path=root)
corpus = load_corpus(root)
print(manifest["splits"])
print("mean findings per sample:", np.mean([s.triplets.exist.sum() for s in corpus.samples]))

# %% [markdown]
# ## The concept bank
#
# Concepts are the pathology and anatomy terms that appear in training
# reports, ordered by how often they are mentioned. Each carries a short text
# description that is embedded as its query vector.

# %%
bank = build_bank(corpus, load_descriptions())
counts, _ = count_concepts(grammar, [s.report for s in corpus.split("train")])
for entry in bank.pathologies[:5]:
    print(f"{entry.name:18s} {counts[entry.name]:4d}  {entry.description}")
