import pytest
import torch

from stainshift.backbone import build_tiny_backbone
from stainshift.config import config_from_dict


@pytest.fixture(autouse=True)
def _single_thread():
    # bitwise comparisons assume a fixed reduction order
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


@pytest.fixture
def backbone():
    return build_tiny_backbone(seed=0)


def toy_config(tmp_path=None, **overrides):
    data = {"steps": 3, "checkpoint_every": 1000, "optimizer": {"lr": 1e-3},
            "generator": {"timestep": 0}}
    if tmp_path is not None:
        data["output_dir"] = str(tmp_path / "run")
    for key, value in overrides.items():
        node = data
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g)


def rand_image(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g) * 2 - 1
