"""
运行配置
嵌套的 pydantic 模型，对外暴露为扁平的点分键（sgld.k、sam.rho、train.epochs ...）。
取值优先级：默认值 < 配置文件（key = value） < 命令行参数。
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError

from ..core.config import EVAL_DEFAULTS, PGD_DEFAULTS
from ..core.errors import ConfigError
from .model import ArchOptions
from .training import TrainConfig


class EvalOptions(BaseModel):
    """评估选项"""
    model_config = {"extra": "forbid"}

    ece_bins: int = Field(EVAL_DEFAULTS["ece_bins"], ge=1)
    ood_method: Literal["density", "maxprob"] = "density"
    ood_data: Optional[str] = Field(None, description="interp | noise | shift:<dx> | 数据集描述符")
    ood_n: int = Field(2000, ge=1)
    attack_norm: Literal["linf", "l2"] = "linf"
    eps: List[float] = Field([0.0, 0.05, 0.1, 0.2])
    pgd_steps: int = Field(PGD_DEFAULTS["steps"], ge=1)
    pgd_step_ratio: float = Field(PGD_DEFAULTS["step_ratio"], gt=0)
    random_start: bool = PGD_DEFAULTS["random_start"]
    landscape_dims: Literal[1, 2] = 1
    landscape_range: Tuple[float, float] = (-1.0, 1.0)
    landscape_points: int = Field(41, ge=1)
    landscape_norm: Literal["filter", "none"] = "filter"
    landscape_fraction: float = Field(EVAL_DEFAULTS["landscape_fraction"], gt=0, le=1)
    landscape_cap: int = Field(EVAL_DEFAULTS["landscape_cap"], ge=1)
    sample_n: int = Field(512, ge=0)
    sample_k: int = Field(100, ge=0)
    sample_class: Optional[int] = None
    rank: Literal["none", "px", "pyx"] = "none"
    coverage_radius: Optional[float] = Field(None, gt=0)
    plot: bool = False


class RunConfig(BaseModel):
    """一次运行的完整配置（写入运行目录的 config.json）"""
    model_config = {"extra": "forbid"}

    data: str = "toy:gaussians8"
    test_data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    model: ArchOptions = Field(default_factory=ArchOptions)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalOptions = Field(default_factory=EvalOptions)

    @property
    def seed(self) -> int:
        return self.train.seed


# 简写前缀 -> 完整路径
ALIASES = {
    "sgld": "train.sgld",
    "sam": "train.sam",
    "optim": "train.optim",
    "seed": "train.seed",
    "epochs": "train.epochs",
}


def _flatten_fields(model: type, prefix: str = "") -> Dict[str, Any]:
    keys: Dict[str, Any] = {}
    for name, field in model.model_fields.items():
        path = f"{prefix}{name}"
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.update(_flatten_fields(annotation, f"{path}."))
        else:
            keys[path] = field
    return keys


CONFIG_KEYS = _flatten_fields(RunConfig)


def resolve_key(key: str) -> str:
    """简写展开并校验，未注册的键抛出 ConfigError"""
    key = key.strip().replace("-", "_")
    head, _, rest = key.partition(".")
    if head in ALIASES:
        key = ALIASES[head] + (f".{rest}" if rest else "")
    if key not in CONFIG_KEYS:
        raise ConfigError(f"未知配置项: {key}", {"key": key})
    return key


def parse_value(text: Any) -> Any:
    """配置文本 -> Python 值（JSON 字面量、逗号列表或原样字符串）"""
    if not isinstance(text, str):
        return text
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if text in ("True", "False"):
        return text == "True"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    return text


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """读取 UTF-8 的 key = value 配置文件，# 开头为注释"""
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"配置文件第 {lineno} 行缺少 '=': {raw}", {"path": str(path), "line": lineno})
        key, value = line.split("=", 1)
        values[resolve_key(key)] = parse_value(value)
    return values


def _assign(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def build_run_config(config_file: Optional[Union[str, Path]] = None,
                     overrides: Optional[Mapping[str, Any]] = None,
                     base: Optional[RunConfig] = None) -> RunConfig:
    """合并默认值、配置文件与命令行覆盖项"""
    tree = (base or RunConfig()).model_dump()
    layers: List[Dict[str, Any]] = []
    if config_file is not None:
        layers.append(load_config_file(config_file))
    if overrides:
        layers.append({resolve_key(k): parse_value(v) for k, v in overrides.items()})
    for layer in layers:
        for key, value in layer.items():
            _assign(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError(f"配置无效: {'; '.join(problems)}", {"errors": problems}) from e


def flat_config(config: RunConfig) -> Dict[str, Any]:
    """RunConfig -> 扁平点分键字典"""
    dumped = config.model_dump(mode="json")
    flat: Dict[str, Any] = {}
    for key in CONFIG_KEYS:
        node: Any = dumped
        for part in key.split("."):
            node = node[part]
        flat[key] = node
    return flat
