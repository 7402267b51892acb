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
# # Training a small model and looking at its attention
#
# A few epochs on a 400-sample corpus is enough to see the concept queries
# start to attend to the right anatomical boxes. Full-size runs use the
# defaults in `TrainConfig` on 2000 samples.

# %%
import tempfile

import numpy as np
import torch

from concept_rrg.concept_bank import build_bank, load_descriptions
from concept_rrg.corpus import default_grammar, load_corpus, write_corpus
from concept_rrg.evaluation import attention_localization, evaluate_model
from concept_rrg.model import TrainConfig
from concept_rrg.training import train

root = tempfile.mkdtemp()
write_corpus(default_grammar(), 400, seed=3, path=root)
corpus = load_corpus(root)
bank = build_bank(corpus, load_descriptions())

# %% [markdown]
# ## Training
#
# The log holds one record per optimizer step with every loss component, and
# one per validation pass.

# %%
config = TrainConfig(seed=0, epochs=4, val_limit=40)
result = train(config, corpus, bank)
steps = [r for r in result.log if "loss" in r]
for r in steps[:: max(1, len(steps) // 6)]:
    print({k: round(v, 3) for k, v in r.items() if k in ("step", "loss", "anat_cls", "path_cls", "contrastive", "matching", "generation")})
print([round(r["val_macro_F1"], 3) for r in result.log if "val_macro_F1" in r])

# %% [markdown]
# ## Generated reports

# %%
model = result.best_model()
test = corpus.split("test")[:20]
report, generated = evaluate_model(model, test, corpus.grammar)
for s, g in list(zip(test, generated))[:3]:
    print("ref:", s.report_text)
    print("gen:", " ".join(g))
    print()
print(f"BLEU-4 {report.bleu_4:.3f}  ROUGE-L {report.rouge_l:.3f}  macro F1 {report.ce_macro['F1']:.3f}")

# %% [markdown]
# ## Where do the pathology queries look?
#
# The localization score divides the attention mass inside the finding's
# anatomy box by the box's share of the image, so uniform attention scores 1.
# Compare against the same architecture before training.

# %%
untrained = train(config.replace(epochs=0), corpus, bank).best_model()
print("trained  ", round(attention_localization(model, test, corpus.grammar)["mean"], 2))
print("untrained", round(attention_localization(untrained, test, corpus.grammar)["mean"], 2))

# %% [markdown]
# One sample's head-averaged last-layer attention for its first finding,
# drawn on the 8x8 patch grid.

# %%
s = next(s for s in test if s.triplets.exist.any())
i, j = s.triplets.present()[0]
name = corpus.grammar.pathology_names[i]
k = model.bank.pathology_names.index(name)
with torch.no_grad():
    fb = model.features(torch.tensor(s.image, dtype=torch.float32)[None])
grid = fb.alignment.attn_p[0, -1, :, k].mean(0).reshape(model.encoder.grid_shape).numpy()
print(name, "in", corpus.grammar.anatomy_names[j], "box", corpus.grammar.region_boxes[j])
print(np.array2string(grid / grid.max(), precision=1, suppress_small=True))
print("gate:", round(float(fb.gates.pathology.gates[0, k]), 3))
