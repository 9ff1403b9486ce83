"""
动态记录的计算图与反向模式求导
每个训练步重建一次图（define-by-run）；图构建后由 evaluate 绑定求值，
求值后保留中间结果供 gradient 使用。
"""

from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..core.config import settings
from ..core.errors import GraphStateError, NonFiniteError, ShapeError, UnboundInputError
from .ops import OPS
from .tensor import ArrayLike, Tensor, as_array

Number = Union[int, float]


class Node:
    """计算图节点（算子记录）"""

    __slots__ = ("graph", "id", "op", "inputs", "attrs", "name")

    def __init__(self, graph: "Graph", node_id: int, op: str, inputs: Sequence[int],
                 attrs: Dict[str, Any], name: Optional[str] = None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other: "Node") -> "Node":
        if not isinstance(other, Node) or other.graph is not self.graph:
            raise GraphStateError("节点属于不同的计算图")
        return other

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, other)
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.shift(self, -other)
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.shift(self.graph.neg(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Node(#{self.id} {self.op}{label})"


class Graph:
    """计算图：节点按创建顺序即为拓扑序"""

    def __init__(self, strict: Optional[bool] = None):
        self.nodes: List[Node] = []
        self.placeholders: Dict[str, Node] = {}
        self.outputs: Dict[str, Node] = {}
        self.strict = settings.STRICT_NUMERICS if strict is None else strict
        self._values: Dict[int, np.ndarray] = {}
        self._ctx: Dict[int, Any] = {}
        self.evaluated = False

    # ---- 构图 ----

    def _record(self, op: str, inputs: Sequence[Node], attrs: Optional[Dict[str, Any]] = None,
                name: Optional[str] = None) -> Node:
        for node in inputs:
            if node.graph is not self:
                raise GraphStateError("节点属于不同的计算图")
        if self.evaluated:
            raise GraphStateError("计算图已求值，不能继续追加节点")
        node = Node(self, len(self.nodes), op, [n.id for n in inputs], attrs or {}, name)
        self.nodes.append(node)
        return node

    def placeholder(self, name: str) -> Node:
        """自由输入，由 evaluate 的 bindings 绑定"""
        if name in self.placeholders:
            return self.placeholders[name]
        node = self._record("placeholder", [], name=name)
        self.placeholders[name] = node
        return node

    def constant(self, value: ArrayLike, name: Optional[str] = None) -> Node:
        array = np.asarray(as_array(value))
        array.setflags(write=False)
        return self._record("constant", [], {"value": array}, name)

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def add(self, a: Node, b: Node) -> Node:
        return self._record("add", [a, b])

    def sub(self, a: Node, b: Node) -> Node:
        return self._record("sub", [a, b])

    def mul(self, a: Node, b: Node) -> Node:
        return self._record("mul", [a, b])

    def neg(self, a: Node) -> Node:
        return self._record("neg", [a])

    def scale(self, a: Node, factor: Number) -> Node:
        return self._record("scale", [a], {"factor": float(factor)})

    def shift(self, a: Node, offset: Number) -> Node:
        return self._record("shift", [a], {"offset": float(offset)})

    def matmul(self, a: Node, b: Node) -> Node:
        return self._record("matmul", [a, b])

    def conv2d(self, x: Node, w: Node, pad: int = 0) -> Node:
        return self._record("conv2d", [x, w], {"pad": int(pad)})

    def relu(self, x: Node) -> Node:
        return self._record("relu", [x])

    def leaky_relu(self, x: Node, slope: float = 0.2) -> Node:
        return self._record("leaky_relu", [x], {"slope": float(slope)})

    def batch_norm(self, x: Node, gamma: Node, beta: Node, mode: str,
                   running_mean: Optional[np.ndarray] = None, running_var: Optional[np.ndarray] = None,
                   eps: float = 1e-5) -> Node:
        if mode not in ("train", "eval"):
            raise ValueError(f"未知的归一化模式: {mode}")
        attrs = {"mode": mode, "eps": eps, "running_mean": running_mean, "running_var": running_var}
        return self._record("batch_norm", [x, gamma, beta], attrs)

    def reshape(self, x: Node, shape) -> Node:
        return self._record("reshape", [x], {"shape": tuple(shape)})

    def transpose(self, x: Node) -> Node:
        return self._record("transpose", [x])

    def sum(self, x: Node, axis=None, keepdims: bool = False) -> Node:
        return self._record("sum", [x], {"axis": axis, "keepdims": keepdims})

    def mean(self, x: Node, axis=None, keepdims: bool = False) -> Node:
        return self._record("mean", [x], {"axis": axis, "keepdims": keepdims})

    def logsumexp(self, x: Node, axis=-1, keepdims: bool = False) -> Node:
        return self._record("logsumexp", [x], {"axis": axis, "keepdims": keepdims})

    def softmax_cross_entropy(self, logits: Node, labels: ArrayLike) -> Node:
        labels = np.asarray(labels, dtype=np.int64)
        labels.setflags(write=False)
        return self._record("softmax_cross_entropy", [logits], {"labels": labels})

    def pick(self, x: Node, indices: ArrayLike) -> Node:
        indices = np.asarray(indices, dtype=np.int64)
        indices.setflags(write=False)
        return self._record("pick", [x], {"indices": indices})

    def l2_norm(self, x: Node) -> Node:
        return self._record("l2_norm", [x])

    # ---- 求值结果 ----

    def value(self, node: Node) -> np.ndarray:
        if node.id not in self._values:
            raise GraphStateError(f"节点尚未求值: {node}")
        return self._values[node.id]

    def aux(self, node: Node) -> Any:
        """算子前向保存的附加信息（例如批归一化的批统计量）"""
        if node.id not in self._ctx:
            raise GraphStateError(f"节点尚未求值: {node}")
        return self._ctx[node.id]

    def __len__(self) -> int:
        return len(self.nodes)


def evaluate(graph: Graph, bindings: Mapping[str, ArrayLike], strict: Optional[bool] = None) -> Dict[str, Tensor]:
    """绑定自由输入并前向求值，返回已登记的输出"""
    strict = graph.strict if strict is None else strict
    missing = [name for name in graph.placeholders if name not in bindings]
    if missing:
        raise UnboundInputError(f"未绑定的输入: {missing}", {"missing": missing})

    values: Dict[int, np.ndarray] = {}
    ctxs: Dict[int, Any] = {}
    for node in graph.nodes:
        if node.op == "placeholder":
            array = as_array(bindings[node.name])
            if array.dtype.kind != "f":
                array = array.astype(np.float64)
            values[node.id] = array
            continue
        op = OPS[node.op]
        inputs = [values[i] for i in node.inputs]
        op.check(inputs, node.attrs)
        out, ctx = op.forward(inputs, node.attrs)
        if strict and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"节点 #{node.id} ({node.op}) 出现非有限值", {"node": node.id, "op": node.op})
        values[node.id] = out
        ctxs[node.id] = ctx

    graph._values = values
    graph._ctx = ctxs
    graph.evaluated = True
    return {name: Tensor(values[node.id]) for name, node in graph.outputs.items()}


def gradient(graph: Graph, scalar_output: Node, wrt: Iterable[Union[str, Node]]) -> Dict[str, np.ndarray]:
    """∂scalar/∂t，对每个请求的占位符（按名称返回）"""
    if not graph.evaluated or scalar_output.id not in graph._values:
        raise GraphStateError("计算图尚未求值")
    seed = graph._values[scalar_output.id]
    if np.shape(seed) != ():
        raise GraphStateError(f"输出不是标量: shape={np.shape(seed)}")

    targets: Dict[str, Node] = {}
    for item in wrt:
        node = item if isinstance(item, Node) else graph.placeholders.get(item)
        if node is None or node.op != "placeholder":
            raise GraphStateError(f"求导对象不是计算图的占位符: {item}")
        targets[node.name] = node

    # 只在通往目标的路径上反传
    needs = [False] * len(graph.nodes)
    target_ids = {node.id for node in targets.values()}
    for node in graph.nodes[:scalar_output.id + 1]:
        needs[node.id] = node.id in target_ids or any(needs[i] for i in node.inputs)

    grads: Dict[int, np.ndarray] = {scalar_output.id: np.ones_like(seed)}
    for node in reversed(graph.nodes[:scalar_output.id + 1]):
        grad = grads.get(node.id)
        if grad is None or not node.inputs or not needs[node.id]:
            continue
        op = OPS[node.op]
        inputs = [graph._values[i] for i in node.inputs]
        input_needs = [needs[i] for i in node.inputs]
        input_grads = op.backward(grad, inputs, graph._values[node.id], graph._ctx[node.id], node.attrs, input_needs)
        for input_id, needed, g in zip(node.inputs, input_needs, input_grads):
            if not needed or g is None:
                continue
            grads[input_id] = grads[input_id] + g if input_id in grads else g

    result: Dict[str, np.ndarray] = {}
    for name, node in targets.items():
        value = graph._values[node.id]
        g = grads.get(node.id)
        if g is None:
            g = np.zeros_like(value)
        elif g.shape != value.shape:
            raise ShapeError(f"梯度形状与输入不一致: {name}")
        result[name] = np.ascontiguousarray(g, dtype=value.dtype)
    return result
