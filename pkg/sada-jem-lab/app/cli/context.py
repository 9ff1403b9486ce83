"""
命令共享的装配逻辑：配置解析、输出目录、检查点与数据集加载
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from ..core.config import settings
from ..core.errors import ConfigError, ShapeError
from ..models.network import LogitModel, load_checkpoint
from ..schemas.run import RunConfig, build_run_config
from ..services.data_service import Dataset, parse_data_spec
from .router import parse_overrides

logger = logging.getLogger(__name__)

PLOT_ARGUMENT = (["--plot"], {"action": "store_true", "help": "同时输出 PNG 图"})


def resolve_run_config(args: argparse.Namespace, explicit: Optional[Dict[str, Any]] = None) -> RunConfig:
    """默认值 < --config 文件 < 命令行覆盖项"""
    overrides = parse_overrides(getattr(args, "extra", []) or [])
    if getattr(args, "plot", False):
        overrides["eval.plot"] = True
    overrides.update({k: v for k, v in (explicit or {}).items() if v is not None})
    return build_run_config(getattr(args, "config", None), overrides)


def output_dir(config: RunConfig, default_name: str) -> Path:
    path = Path(config.out) if config.out else Path(settings.RUN_ROOT) / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_model(config: RunConfig) -> LogitModel:
    if not config.checkpoint:
        raise ConfigError("缺少 --checkpoint")
    model = load_checkpoint(config.checkpoint)
    logger.info(f"加载检查点: {config.checkpoint} (arch={model.config.arch})")
    return model


def load_split(config: RunConfig, split: str) -> Dataset:
    spec = config.test_data if split == "test" and config.test_data else config.data
    return parse_data_spec(spec, split)


def check_model_data(model: LogitModel, dataset: Dataset) -> None:
    """检查点与数据集的输入形状、类别数必须一致"""
    if tuple(model.config.input_shape) != dataset.shape or model.config.class_count != dataset.class_count:
        raise ShapeError(
            f"检查点与数据集不兼容: 模型 {tuple(model.config.input_shape)}/{model.config.class_count} 类, "
            f"数据 {dataset.shape}/{dataset.class_count} 类"
        )
