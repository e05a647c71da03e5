# %% [markdown]
# # Training on a synthetic separable set
#
# Dark images are class 0, bright images class 1. A width-reduced network
# should fit the 32 training images within a couple of hundred SGD steps.

# %%
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from tbnet import build_network
from tbnet.data import DatasetManifest, Record, load_manifest, write_manifest
from tbnet.evaluate import evaluate, format_table
from tbnet.model import NetworkConfig
from tbnet.train import TrainConfig, train

root = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
records = []
for i in range(40):
    label = i % 2
    img = np.clip(rng.normal(200 if label else 55, 20, (224, 224)), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(root / f"{i:03d}.png")
    records.append(Record(f"{i:03d}.png", label, "train" if i < 32 else "val"))
write_manifest(DatasetManifest(records, root), root / "manifest.csv")
manifest = load_manifest(root / "manifest.csv")
print(manifest.counts())

# %%
cfg = NetworkConfig.from_dict({
    "stem": {"channels": 4, "kernel": 3, "stride": 2},
    "stages": [
        {"type": "pepe", "channels": 8, "stride": 2, "proj1": 2, "proj2": 4},
        {"type": "attention_condenser", "channels": 8, "condense_factor": 2, "embed_channels": 4},
        {"type": "conv", "channels": 16, "kernel": 3, "stride": 2},
    ],
})
result = train(build_network(cfg, seed=0), manifest,
               TrainConfig(epochs=1000, max_steps=200, seed=0))
losses = np.array(result.step_losses)
print("loss by 20-step window:", np.round(losses[: len(losses) // 20 * 20].reshape(-1, 20).mean(1), 4))

# %%
ev = evaluate(result.model, manifest, "train")
print(format_table(ev.confusion, "tiny"))
