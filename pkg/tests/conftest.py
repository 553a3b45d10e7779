import numpy as np
import pytest
import torch

from structseg.config import load_config
from structseg import data as D


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small 3-class dataset shared by pipeline-level tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    return D.generate_dataset(root, num_train=6, num_test=2, num_classes=3,
                              shape=(6, 64, 64), seed=7)


@pytest.fixture()
def tiny_cfg():
    return load_config(overrides={
        "train.max_epochs": 2,
        "train.iters_per_epoch": 4,
        "train.batch_size": 3,
        "data.target_size": 64,
    })


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / denom


def central_difference(fn, param: torch.Tensor, index, h: float = 1e-5) -> float:
    """Central finite difference of scalar fn() w.r.t. one parameter element."""
    with torch.no_grad():
        orig = param.view(-1)[index].item()
        param.view(-1)[index] = orig + h
        up = fn().item()
        param.view(-1)[index] = orig - h
        down = fn().item()
        param.view(-1)[index] = orig
    return (up - down) / (2 * h)
