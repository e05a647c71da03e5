import numpy as np
import pytest
from PIL import Image

from tbnet.model import NetworkConfig

TINY = {
    "name": "tiny",
    "stem": {"channels": 4, "kernel": 3, "stride": 2},
    "stages": [
        {"type": "pepe", "channels": 8, "stride": 2, "proj1": 2, "proj2": 4},
        {"type": "attention_condenser", "channels": 8, "condense_factor": 2, "embed_channels": 4},
        {"type": "conv", "channels": 16, "kernel": 3, "stride": 2},
    ],
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return NetworkConfig.from_dict(TINY)


def small_config(size=16):
    """Same family at a toy resolution, for gradient checks."""
    d = dict(TINY, input_size=[size, size])
    return NetworkConfig.from_dict(d)


def write_synthetic_dataset(root, n_train=32, n_val=8, size=224, seed=0):
    """Dark images are label 0, bright images label 1; alternating labels."""
    rng = np.random.default_rng(seed)
    rows = ["path,label,split"]
    for i in range(n_train + n_val):
        label = i % 2
        base = 200 if label else 55
        img = np.clip(base + rng.normal(0, 20, (size, size)), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / f"img{i:03d}.png")
        rows.append(f"img{i:03d}.png,{label},{'train' if i < n_train else 'val'}")
    path = root / "manifest.csv"
    path.write_text("\n".join(rows) + "\n")
    return path


@pytest.fixture(scope="session")
def synthetic_manifest(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("synthetic"))


# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
