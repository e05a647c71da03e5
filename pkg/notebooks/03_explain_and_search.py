# %% [markdown]
# # Occlusion masks and constrained search
#
# A model whose score depends only on the mean of a fixed window gives a
# known ground truth for the critical-factor mask.

# %%
import hashlib

import numpy as np

from tbnet.explain import explain
from tbnet.search import SearchSpace, search, universal_performance

r0, c0, s = 100, 60, 32


def window_model(batch):
    p = batch[:, 0, r0:r0 + s, c0:c0 + s].mean(axis=(1, 2))
    return np.stack([1 - p, p], axis=1)


img = np.random.default_rng(0).uniform(0.05, 0.25, (224, 224)).astype(np.float32)
img[r0:r0 + s, c0:c0 + s] = 0.9
res = explain(window_model, img)
truth = np.zeros_like(res.mask)
truth[r0:r0 + s, c0:c0 + s] = True
iou = (res.mask & truth).sum() / (res.mask | truth).sum()
print(f"mask pixels {res.mask.sum()}, IoU {iou:.3f}")

# %% [markdown]
# The score used to rank feasible candidates rewards accuracy and penalises
# parameters and MACs on a log scale.

# %%
print(universal_performance(100, 1, 1), universal_performance(100, 2, 1))

# %%
space = SearchSpace(stem_channels=[8, 16], stage_counts=[2], widths=[16, 32], repeats=[1],
                    condenser=[False], bottlenecks=[0.5], input_size=(32, 32))


def fake_metrics(cfg):
    h = int(hashlib.sha256(cfg.canonical_json().encode()).hexdigest()[:8], 16)
    sens, spec = 0.90 + (h % 97) / 970, 0.90 + (h // 97 % 89) / 890
    return sens, spec, (sens + spec) / 2


out = search(space, space.size(), fake_metrics, seed=0)
print(space.size(), "configs; best u =", round(out.best.u_score, 3))
