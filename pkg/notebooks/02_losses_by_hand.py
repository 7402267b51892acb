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
# # Auxiliary losses on tiny inputs
#
# The three concept-level objectives are small enough to evaluate by hand.
# This notebook checks a few values that can be written down in closed form.

# %%
import math

import torch

from concept_rrg.enhancement import contrastive_loss, matching_loss
from concept_rrg.gating import attention_entropy, gate_features

torch.set_default_dtype(torch.float64)

# %% [markdown]
# ## Contrastive loss
#
# Each anatomy feature is matched to the same anatomy in a partner sample and
# contrasted with the partner's other anatomies. When all similarities are
# equal the loss is the log of the number of anatomies.

# %%
for n in (1, 2, 5):
    v = torch.ones(n, 4)
    print(n, contrastive_loss(v, 2 * v).item(), math.log(n))

# %% [markdown]
# With orthonormal features, the positive has cosine 1 and the negative 0.

# %%
print(contrastive_loss(torch.eye(2), torch.eye(2)).item(), -math.log(math.e / (math.e + 1)))

# %% [markdown]
# ## Matching loss
#
# A present pathology should point toward the anatomies that contain it and
# away from the rest. Negative cosines are clamped at zero, so anatomies
# already facing away cost nothing.

# %%
path_feats = torch.tensor([[1.0, 0.0]])
anat_feats = torch.tensor([[0.9, math.sqrt(1 - 0.81)], [-0.3, math.sqrt(1 - 0.09)]])
print(matching_loss(path_feats, anat_feats, [[1, 0]], [1]).item())  # (|1 - 0.9| + |0 - 0|) / 2

# %% [markdown]
# ## Entropy gating
#
# A concept whose attention is spread evenly over four tokens has entropy
# ln 4; a concept that attends to a single token has entropy 0. The gate is a
# sigmoid of a learned weighting of per-head entropies.

# %%
rows = torch.tensor([[0.25] * 4, [0.5, 0.5, 0, 0], [1.0, 0, 0, 0]])
print(attention_entropy(rows), math.log(4), math.log(2))

feats = torch.ones(1, 3, 2)
entropies = attention_entropy(rows).reshape(1, 3, 1)
gated, gates = gate_features(feats, entropies, torch.full((3, 1), -1.0))
print(gates)
