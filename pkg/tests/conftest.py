import pytest
import torch

from dhgflow.pipeline.config import RunConfig, load_config

torch.set_num_threads(1)


FAST_TOML = """
[data]
per_domain = 60
per_eval_group = 24

[pretrain]
epochs = 3
pairs_per_epoch = 64

[stage2]
epochs = 4

[stage3]
epochs = 2

[field]
width = 32
n_blocks = 1

[eval]
steps = 10
n_mc = 16
"""


@pytest.fixture
def fast_toml(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST_TOML, encoding="utf-8")
    return p


@pytest.fixture
def fast_cfg(fast_toml) -> RunConfig:
    return load_config(fast_toml)
