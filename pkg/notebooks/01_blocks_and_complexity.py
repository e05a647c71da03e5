# %% [markdown]
# # Blocks and complexity
#
# Build the reference network, look at its per-layer cost table and check
# that an attention condenser costs far less than a dense C*C*H*W mixing.

# %%
import numpy as np

from tbnet import build_network, count_complexity, reference_config
from tbnet.model import NetworkConfig

cfg = reference_config()
report = count_complexity(cfg)
print(report.table())
print(f"params {report.total_params / 1e6:.3f}M  MACs {report.total_macs / 1e9:.3f}G")

# %% [markdown]
# The analyzer and the built network agree on the parameter count.

# %%
net = build_network(cfg, seed=0)
built = sum(p.data.size for p in net.parameters())
print(built, report.total_params, built == report.total_params)

# %% [markdown]
# Forward a random batch through a width-reduced variant.

# %%
tiny = NetworkConfig.from_dict({
    "input_size": [64, 64],
    "stem": {"channels": 4, "kernel": 3, "stride": 2},
    "stages": [
        {"type": "pepe", "channels": 8, "stride": 2, "proj1": 2, "proj2": 4},
        {"type": "attention_condenser", "channels": 8, "condense_factor": 2, "embed_channels": 4},
        {"type": "conv", "channels": 16, "kernel": 3, "stride": 2},
    ],
})
x = np.random.default_rng(0).uniform(0, 1, (3, 1, 64, 64)).astype(np.float32)
print(build_network(tiny, seed=0).predict_proba(x))
