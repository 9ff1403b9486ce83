"""
分类网络 f_θ 及其能量视图
E(x) = -LSE(f(x))，条件能量 E(x, y) = -f(x)[y]
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autodiff.graph import Graph, Node, evaluate, gradient
from ..autodiff.tensor import ArrayLike, ParameterSet
from ..core.checkpoint import read_tensor_file, write_tensor_file
from ..core.errors import CheckpointError, ShapeError
from ..schemas.model import ModelConfig

logger = logging.getLogger(__name__)

NORM_PREFIX = "norm:"
META_CONFIG = "meta:config"
NORM_MOMENTUM = 0.1


@dataclass
class ForwardNodes:
    """一次前向构图的关键节点"""
    logits: Node
    features: Optional[Node]
    norm_nodes: List[Tuple[str, Node]] = field(default_factory=list)


def parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...], Optional[int]]]:
    """(名称, 形状, fan_in) 列表；fan_in 为 None 的条目按常数初始化"""
    layout: List[Tuple[str, Tuple[int, ...], Optional[int]]] = []
    batchnorm = config.norm == "batchnorm"

    if config.arch == "cnn":
        channels, height, width = config.input_shape
        for i, out_ch in enumerate(config.channels):
            layout.append((f"conv{i}.weight", (out_ch, channels, 3, 3), channels * 9))
            layout.append((f"conv{i}.bias", (out_ch,), None))
            if batchnorm:
                layout.append((f"cbn{i}.gamma", (out_ch,), None))
                layout.append((f"cbn{i}.beta", (out_ch,), None))
            channels = out_ch
            if config.pool:
                height, width = height // 2, width // 2
        width_in = channels * height * width
    else:
        width_in = int(np.prod(config.input_shape))

    for i, width_out in enumerate(config.hidden):
        layout.append((f"fc{i}.weight", (width_in, width_out), width_in))
        layout.append((f"fc{i}.bias", (width_out,), None))
        if batchnorm:
            layout.append((f"bn{i}.gamma", (width_out,), None))
            layout.append((f"bn{i}.beta", (width_out,), None))
        width_in = width_out

    layout.append(("head.weight", (width_in, config.class_count), width_in))
    layout.append(("head.bias", (config.class_count,), None))
    return layout


def norm_layers(config: ModelConfig) -> List[Tuple[str, int]]:
    """批归一化层名称与通道数"""
    if config.norm != "batchnorm":
        return []
    layers = []
    if config.arch == "cnn":
        layers += [(f"cbn{i}", c) for i, c in enumerate(config.channels)]
    layers += [(f"bn{i}", w) for i, w in enumerate(config.hidden)]
    return layers


class LogitModel:
    """logits 定义能量的分类器"""

    def __init__(self, config: ModelConfig, params: ParameterSet,
                 norm_state: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        expected = {name: shape for name, shape, _ in parameter_layout(config)}
        if list(params.names()) != list(expected):
            raise ShapeError(f"参数名与结构不一致: {params.names()}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"参数 {name} 形状应为 {shape}, 实际 {params[name].shape}")
        self.params = params
        self.norm_state = norm_state if norm_state is not None else self._fresh_norm_state()

    # ---- 构造 ----

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "LogitModel":
        """Kaiming 均匀初始化权重，偏置置零"""
        dtype = np.dtype(config.dtype)
        entries = []
        for name, shape, fan_in in parameter_layout(config):
            if fan_in is not None:
                bound = np.sqrt(6.0 / fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            entries.append((name, value.astype(dtype)))
        logger.debug(f"初始化模型: arch={config.arch}, 参数条目 {len(entries)}")
        return cls(config, ParameterSet(entries))

    def _fresh_norm_state(self) -> Dict[str, np.ndarray]:
        state = {}
        for name, width in norm_layers(self.config):
            state[f"{name}.running_mean"] = np.zeros(width, dtype=self.dtype)
            state[f"{name}.running_var"] = np.ones(width, dtype=self.dtype)
        return state

    def copy(self) -> "LogitModel":
        return LogitModel(self.config, self.params, {k: v.copy() for k, v in self.norm_state.items()})

    def with_params(self, params: ParameterSet) -> "LogitModel":
        """共享 running 统计、替换参数的只读视图（eval 用）"""
        return LogitModel(self.config, params, self.norm_state)

    # ---- 构图 ----

    def build(self, graph: Graph, x: Node, mode: str = "eval") -> ForwardNodes:
        """在给定计算图上记录前向过程，参数以同名占位符出现"""
        cfg = self.config
        p = graph.placeholder
        norm_nodes: List[Tuple[str, Node]] = []
        h = x

        if cfg.arch == "cnn":
            channels, height, width = cfg.input_shape
            for i, out_ch in enumerate(cfg.channels):
                h = graph.conv2d(h, p(f"conv{i}.weight"), pad=1)
                h = h + graph.reshape(p(f"conv{i}.bias"), (1, out_ch, 1, 1))
                h = self._normalize(graph, h, f"cbn{i}", mode, norm_nodes)
                h = self._activate(graph, h)
                channels = out_ch
                if cfg.pool:
                    # 2x2 平均池化
                    h = graph.reshape(h, (-1, channels, height // 2, 2, width // 2, 2))
                    h = graph.mean(h, axis=(3, 5))
                    height, width = height // 2, width // 2
            h = graph.reshape(h, (-1, channels * height * width))
        elif cfg.input_kind == "image":
            h = graph.reshape(h, (-1, int(np.prod(cfg.input_shape))))

        features = h if cfg.arch == "cnn" else None
        for i in range(len(cfg.hidden)):
            h = h @ p(f"fc{i}.weight") + p(f"fc{i}.bias")
            h = self._normalize(graph, h, f"bn{i}", mode, norm_nodes)
            h = self._activate(graph, h)
            features = h

        logits = h @ p("head.weight") + p("head.bias")
        return ForwardNodes(logits=logits, features=features, norm_nodes=norm_nodes)

    def _normalize(self, graph: Graph, h: Node, name: str, mode: str, norm_nodes: list) -> Node:
        if self.config.norm != "batchnorm":
            return h
        node = graph.batch_norm(
            h, graph.placeholder(f"{name}.gamma"), graph.placeholder(f"{name}.beta"), mode,
            running_mean=self.norm_state[f"{name}.running_mean"],
            running_var=self.norm_state[f"{name}.running_var"],
        )
        norm_nodes.append((name, node))
        return node

    def _activate(self, graph: Graph, h: Node) -> Node:
        if self.config.activation == "leaky_relu":
            return graph.leaky_relu(h)
        return graph.relu(h)

    def bindings(self, params: Optional[ParameterSet] = None, **inputs: ArrayLike) -> Dict[str, ArrayLike]:
        """参数 + 输入的求值绑定"""
        bound: Dict[str, ArrayLike] = dict((params or self.params).arrays())
        bound.update(inputs)
        return bound

    def commit_norm_stats(self, graph: Graph, norm_nodes: Sequence[Tuple[str, Node]]) -> None:
        """用训练模式批统计量更新 running 统计（无偏方差）"""
        for name, node in norm_nodes:
            stats = graph.aux(node)
            count = stats["count"]
            unbiased = stats["var"] * (count / max(count - 1, 1))
            mean_key, var_key = f"{name}.running_mean", f"{name}.running_var"
            self.norm_state[mean_key] = ((1 - NORM_MOMENTUM) * self.norm_state[mean_key]
                                         + NORM_MOMENTUM * stats["mean"]).astype(self.dtype)
            self.norm_state[var_key] = ((1 - NORM_MOMENTUM) * self.norm_state[var_key]
                                        + NORM_MOMENTUM * unbiased).astype(self.dtype)

    def check_input(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != tuple(self.config.input_shape):
            raise ShapeError(f"输入形状 {x.shape[1:]} 与模型 {tuple(self.config.input_shape)} 不一致")
        return x

    def check_class(self, y: Union[int, ArrayLike], n: int) -> np.ndarray:
        labels = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.class_count):
            raise ShapeError(f"类别越界: 类别数 {self.config.class_count}", {"class": np.asarray(y).tolist()})
        return labels

    # ---- 前向 ----

    def forward_logits(self, x: ArrayLike, mode: str = "eval") -> np.ndarray:
        """logits；train 模式使用批统计量并更新 running 统计"""
        x = self.check_input(x)
        graph = Graph()
        nodes = self.build(graph, graph.placeholder("x"), mode)
        graph.output("logits", nodes.logits)
        out = evaluate(graph, self.bindings(x=x))
        if mode == "train":
            self.commit_norm_stats(graph, nodes.norm_nodes)
        return out["logits"].data

    def energy(self, x: ArrayLike) -> np.ndarray:
        """E(x) = -logsumexp(f(x))，eval 模式"""
        x = self.check_input(x)
        graph = Graph()
        logits = self.build(graph, graph.placeholder("x")).logits
        graph.output("energy", -graph.logsumexp(logits, axis=1))
        return evaluate(graph, self.bindings(x=x))["energy"].data

    def conditional_energy(self, x: ArrayLike, y: Union[int, ArrayLike]) -> np.ndarray:
        """E(x, y) = -f(x)[y]"""
        x = self.check_input(x)
        labels = self.check_class(y, x.shape[0])
        graph = Graph()
        logits = self.build(graph, graph.placeholder("x")).logits
        graph.output("energy", -graph.pick(logits, labels))
        return evaluate(graph, self.bindings(x=x))["energy"].data

    def penultimate_features(self, x: ArrayLike) -> np.ndarray:
        """最后一层线性映射之前的激活（eval 模式）"""
        x = self.check_input(x)
        graph = Graph()
        nodes = self.build(graph, graph.placeholder("x"))
        if nodes.features is None:
            raise ShapeError("模型没有隐藏层，无法提取特征")
        graph.output("features", nodes.features)
        return evaluate(graph, self.bindings(x=x))["features"].data

    def input_gradient(self, x: ArrayLike, conditional_class: Optional[Union[int, ArrayLike]] = None
                       ) -> Tuple[np.ndarray, np.ndarray]:
        """(逐样本能量, ∂ΣE/∂x)；SGLD 使用"""
        x = self.check_input(x)
        graph = Graph()
        logits = self.build(graph, graph.placeholder("x")).logits
        if conditional_class is None:
            energies = -graph.logsumexp(logits, axis=1)
        else:
            energies = -graph.pick(logits, self.check_class(conditional_class, x.shape[0]))
        total = graph.sum(energies)
        graph.output("energy", energies)
        out = evaluate(graph, self.bindings(x=x))
        return out["energy"].data, gradient(graph, total, ["x"])["x"]

    def loss_input_gradient(self, x: ArrayLike, y: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        """(logits, ∂xent/∂x)；PGD 使用"""
        x = self.check_input(x)
        labels = self.check_class(y, x.shape[0])
        graph = Graph()
        logits = self.build(graph, graph.placeholder("x")).logits
        loss = graph.softmax_cross_entropy(logits, labels)
        graph.output("logits", logits)
        out = evaluate(graph, self.bindings(x=x))
        return out["logits"].data, gradient(graph, loss, ["x"])["x"]

    def output_axes(self) -> Dict[str, Optional[int]]:
        """每个参数的输出单元轴（一维参数为 None，逐元素处理）"""
        axes: Dict[str, Optional[int]] = {}
        for name, tensor in self.params.items():
            if tensor.data.ndim == 1:
                axes[name] = None
            elif name.startswith("conv"):
                axes[name] = 0
            else:
                axes[name] = 1
        return axes


def build_model(config: ModelConfig, rng: np.random.Generator) -> LogitModel:
    return LogitModel.initialize(config, rng)


def save_checkpoint(model: LogitModel, path: Union[str, Path]) -> Path:
    """参数、running 统计与模型配置写入 JEMLAB01 文件"""
    entries: Dict[str, np.ndarray] = dict(model.params.arrays())
    for key, value in model.norm_state.items():
        entries[f"{NORM_PREFIX}{key}"] = value
    blob = json.dumps(model.config.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    entries[META_CONFIG] = np.frombuffer(blob, dtype=np.uint8).astype(model.dtype)
    return write_tensor_file(path, entries, dtype=model.dtype)


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> LogitModel:
    """读取检查点并恢复模型"""
    entries = read_tensor_file(path)
    meta = entries.pop(META_CONFIG, None)
    if config is None:
        if meta is None:
            raise CheckpointError(f"检查点缺少模型配置: {path}")
        try:
            config = ModelConfig.model_validate_json(meta.astype(np.uint8).tobytes())
        except ValueError as e:
            raise CheckpointError(f"检查点中的模型配置无法解析: {path}") from e

    dtype = np.dtype(config.dtype)
    params = [(k, v.astype(dtype)) for k, v in entries.items() if not k.startswith(NORM_PREFIX)]
    norm_state = {k[len(NORM_PREFIX):]: v.astype(dtype) for k, v in entries.items() if k.startswith(NORM_PREFIX)}
    expected_norm = {f"{n}.{s}" for n, _ in norm_layers(config) for s in ("running_mean", "running_var")}
    if set(norm_state) != expected_norm:
        raise CheckpointError(f"检查点的归一化统计与模型结构不一致: {path}")
    try:
        return LogitModel(config, ParameterSet(params), norm_state)
    except ShapeError as e:
        raise CheckpointError(f"检查点与模型结构不一致: {e.message}") from e
