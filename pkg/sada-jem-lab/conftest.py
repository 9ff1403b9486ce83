"""
测试共享夹具：固定种子的随机数、小数据集与小模型
"""

import numpy as np
import pytest

from app.core.config import settings
from app.models.network import LogitModel
from app.schemas.model import ModelConfig
from app.schemas.run import RunConfig, build_run_config
from app.services.data_service import synth_images, synth_toy


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setattr(settings, "PROGRESS_BAR", False)
    monkeypatch.setattr(settings, "LOG_WALL_TIME", False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_ds():
    return synth_toy("gaussians8", n=256, noise=0.1, seed=0)


@pytest.fixture
def toy_test_ds():
    return synth_toy("gaussians8", n=128, noise=0.1, seed=1)


@pytest.fixture
def image_ds():
    return synth_images("bars", n=32, size=8, class_count=2, noise=0.1, seed=0)


@pytest.fixture
def mlp64(rng):
    """双精度 MLP，用于有限差分比较"""
    config = ModelConfig(input_shape=(2,), class_count=3, arch="mlp", hidden=[8, 6], dtype="float64")
    return LogitModel.initialize(config, rng)


@pytest.fixture
def cnn64(rng):
    config = ModelConfig(input_shape=(1, 4, 4), class_count=2, arch="cnn", hidden=[5], channels=[3],
                         norm="batchnorm", dtype="float64")
    return LogitModel.initialize(config, rng)


@pytest.fixture
def small_run(tmp_path) -> RunConfig:
    """几秒内能跑完的玩具配置"""
    return build_run_config(overrides={
        "data": "toy:gaussians8:n=256",
        "epochs": 2,
        "train.batch_size": 64,
        "train.checkpoint_every": 1,
        "model.hidden": [16, 16],
        "sgld.k": 2,
        "train.buffer_capacity": 256,
        "eval.sample_n": 64,
        "eval.sample_k": 5,
        "out": str(tmp_path / "run"),
    })
