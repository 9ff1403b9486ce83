"""
反向传播规则注册表
每个算子提供 forward(inputs, attrs) -> (out, ctx) 与
backward(grad, inputs, out, ctx, attrs, needs) -> 每个输入的梯度（不需要的位置返回 None）
"""

from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..core.errors import ShapeError

Grads = Tuple[Optional[np.ndarray], ...]


class Op:
    """算子基类"""
    name = ""
    arity = 1

    def check(self, inputs: Sequence[np.ndarray], attrs: Dict[str, Any]) -> None:
        pass

    def forward(self, inputs: Sequence[np.ndarray], attrs: Dict[str, Any]) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, inputs: Sequence[np.ndarray], out: np.ndarray, ctx: Any,
                 attrs: Dict[str, Any], needs: Sequence[bool]) -> Grads:
        raise NotImplementedError


OPS: Dict[str, Op] = {}


def register(cls):
    """注册算子"""
    OPS[cls.name] = cls()
    return cls


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """沿广播轴求和，还原到 shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"轴越界: axis={axis}, ndim={ndim}")
        normalized.append(a % ndim)
    return tuple(sorted(set(normalized)))


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape)


class _Elementwise(Op):
    arity = 2

    def check(self, inputs, attrs):
        try:
            np.broadcast_shapes(inputs[0].shape, inputs[1].shape)
        except ValueError:
            raise ShapeError(f"{self.name}: 形状不兼容 {inputs[0].shape} vs {inputs[1].shape}")


@register
class Add(_Elementwise):
    name = "add"

    def forward(self, inputs, attrs):
        return inputs[0] + inputs[1], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (unbroadcast(grad, inputs[0].shape) if needs[0] else None,
                unbroadcast(grad, inputs[1].shape) if needs[1] else None)


@register
class Sub(_Elementwise):
    name = "sub"

    def forward(self, inputs, attrs):
        return inputs[0] - inputs[1], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (unbroadcast(grad, inputs[0].shape) if needs[0] else None,
                unbroadcast(-grad, inputs[1].shape) if needs[1] else None)


@register
class Mul(_Elementwise):
    name = "mul"

    def forward(self, inputs, attrs):
        return inputs[0] * inputs[1], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        a, b = inputs
        return (unbroadcast(grad * b, a.shape) if needs[0] else None,
                unbroadcast(grad * a, b.shape) if needs[1] else None)


@register
class Neg(Op):
    name = "neg"

    def forward(self, inputs, attrs):
        return -inputs[0], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (-grad,)


@register
class Scale(Op):
    """乘以 Python 标量（保持 dtype）"""
    name = "scale"

    def forward(self, inputs, attrs):
        return inputs[0] * attrs["factor"], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (grad * attrs["factor"],)


@register
class Shift(Op):
    """加 Python 标量"""
    name = "shift"

    def forward(self, inputs, attrs):
        return inputs[0] + attrs["offset"], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (grad,)


@register
class MatMul(Op):
    name = "matmul"
    arity = 2

    def check(self, inputs, attrs):
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: 形状不兼容 {a.shape} @ {b.shape}")

    def forward(self, inputs, attrs):
        return inputs[0] @ inputs[1], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        a, b = inputs
        return (grad @ b.T if needs[0] else None,
                a.T @ grad if needs[1] else None)


@register
class Conv2d(Op):
    """二维卷积，步长 1，零填充 pad"""
    name = "conv2d"
    arity = 2

    def check(self, inputs, attrs):
        x, w = inputs
        pad = attrs.get("pad", 0)
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: 形状不兼容 x{x.shape} w{w.shape}")
        if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
            raise ShapeError(f"conv2d: 卷积核大于输入 x{x.shape} w{w.shape} pad={pad}")

    def forward(self, inputs, attrs):
        x, w = inputs
        pad = attrs.get("pad", 0)
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = sliding_window_view(xp, w.shape[2:], axis=(2, 3))
        out = np.einsum("nchwij,ocij->nohw", windows, w, optimize=True)
        return out, xp.shape

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        x, w = inputs
        pad = attrs.get("pad", 0)
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]
        dx = dw = None
        if needs[1]:
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            dw = np.einsum("nchwij,nohw->ocij", windows, grad, optimize=True)
        if needs[0]:
            dxp = np.zeros(ctx, dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", grad, w[:, :, i, j], optimize=True)
            dx = dxp[:, :, pad:pad + x.shape[2], pad:pad + x.shape[3]] if pad else dxp
        return dx, dw


@register
class Relu(Op):
    name = "relu"

    def forward(self, inputs, attrs):
        x = inputs[0]
        return np.maximum(x, 0).astype(x.dtype, copy=False), None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (grad * (inputs[0] > 0),)


@register
class LeakyRelu(Op):
    name = "leaky_relu"

    def forward(self, inputs, attrs):
        x = inputs[0]
        return np.where(x > 0, x, x * attrs.get("slope", 0.2)), None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (np.where(inputs[0] > 0, grad, grad * attrs.get("slope", 0.2)),)


@register
class BatchNorm(Op):
    """批归一化；train 使用批统计量，eval 使用 running 统计量"""
    name = "batch_norm"
    arity = 3

    @staticmethod
    def _axes(x: np.ndarray) -> Tuple[int, ...]:
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _view(v: np.ndarray, x: np.ndarray) -> np.ndarray:
        return v if x.ndim == 2 else v.reshape(1, -1, 1, 1)

    def check(self, inputs, attrs):
        x, gamma, beta = inputs
        if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batch_norm: 形状不兼容 x{x.shape} gamma{gamma.shape}")
        if attrs["mode"] == "train" and x.shape[0] * (1 if x.ndim == 2 else x.shape[2] * x.shape[3]) < 2:
            raise ShapeError("batch_norm: 训练模式至少需要 2 个样本")

    def forward(self, inputs, attrs):
        x, gamma, beta = inputs
        eps = attrs.get("eps", 1e-5)
        axes = self._axes(x)
        if attrs["mode"] == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = np.asarray(attrs["running_mean"], dtype=x.dtype)
            var = np.asarray(attrs["running_var"], dtype=x.dtype)
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - self._view(mean, x)) * self._view(inv_std, x)
        out = xhat * self._view(gamma, x) + self._view(beta, x)
        count = x.size // x.shape[1]
        return out, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var, "count": count}

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        x, gamma, beta = inputs
        axes = self._axes(x)
        xhat, inv_std = ctx["xhat"], ctx["inv_std"]
        dgamma = (grad * xhat).sum(axis=axes) if needs[1] else None
        dbeta = grad.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            dxhat = grad * self._view(gamma, x)
            if attrs["mode"] == "train":
                m = ctx["count"]
                dx = self._view(inv_std, x) / m * (
                    m * dxhat
                    - self._view(dxhat.sum(axis=axes), x)
                    - xhat * self._view((dxhat * xhat).sum(axis=axes), x)
                )
            else:
                dx = dxhat * self._view(inv_std, x)
        return dx, dgamma, dbeta


@register
class Reshape(Op):
    name = "reshape"

    def check(self, inputs, attrs):
        try:
            np.empty(inputs[0].shape, dtype=np.bool_).reshape(attrs["shape"])
        except ValueError:
            raise ShapeError(f"reshape: 无法从 {inputs[0].shape} 变为 {attrs['shape']}")

    def forward(self, inputs, attrs):
        return inputs[0].reshape(attrs["shape"]), None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (grad.reshape(inputs[0].shape),)


@register
class Transpose(Op):
    name = "transpose"

    def check(self, inputs, attrs):
        if inputs[0].ndim != 2:
            raise ShapeError(f"transpose: 只支持二维, 实际 {inputs[0].shape}")

    def forward(self, inputs, attrs):
        return inputs[0].T, None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (grad.T,)


@register
class Sum(Op):
    name = "sum"

    def forward(self, inputs, attrs):
        x = inputs[0]
        axes = _normalize_axes(attrs.get("axis"), x.ndim)
        return np.asarray(x.sum(axis=axes, keepdims=attrs.get("keepdims", False))), axes

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return (_expand_reduced(grad, inputs[0].shape, ctx, attrs.get("keepdims", False)),)


@register
class Mean(Op):
    name = "mean"

    def check(self, inputs, attrs):
        x = inputs[0]
        axes = _normalize_axes(attrs.get("axis"), x.ndim)
        if any(x.shape[a] == 0 for a in axes):
            raise ShapeError(f"mean: 空轴 {x.shape}")

    def forward(self, inputs, attrs):
        x = inputs[0]
        axes = _normalize_axes(attrs.get("axis"), x.ndim)
        return np.asarray(x.mean(axis=axes, keepdims=attrs.get("keepdims", False))), axes

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        x = inputs[0]
        count = int(np.prod([x.shape[a] for a in ctx]))
        return (_expand_reduced(grad / count, x.shape, ctx, attrs.get("keepdims", False)),)


@register
class LogSumExp(Op):
    """数值稳定的 log Σ exp（减最大值）"""
    name = "logsumexp"

    def check(self, inputs, attrs):
        x = inputs[0]
        axes = _normalize_axes(attrs.get("axis", -1), x.ndim)
        if any(x.shape[a] == 0 for a in axes):
            raise ShapeError(f"logsumexp: 空轴 {x.shape}")

    def forward(self, inputs, attrs):
        x = inputs[0]
        axes = _normalize_axes(attrs.get("axis", -1), x.ndim)
        m = x.max(axis=axes, keepdims=True)
        m = np.where(np.isfinite(m), m, 0).astype(x.dtype, copy=False)
        lse = np.log(np.exp(x - m).sum(axis=axes, keepdims=True)) + m
        out = lse if attrs.get("keepdims", False) else np.squeeze(lse, axis=axes)
        return out, (axes, lse)

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        axes, lse = ctx
        x = inputs[0]
        softmax = np.exp(x - lse)
        return (softmax * _expand_reduced(grad, x.shape, axes, attrs.get("keepdims", False)),)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@register
class SoftmaxCrossEntropy(Op):
    """融合的 softmax 交叉熵，batch 平均"""
    name = "softmax_cross_entropy"

    def check(self, inputs, attrs):
        logits = inputs[0]
        labels = np.asarray(attrs["labels"])
        if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] == 0:
            raise ShapeError(f"softmax_cross_entropy: 形状不兼容 logits{logits.shape} labels{labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ShapeError(f"标签越界: 类别数 {logits.shape[1]}")

    def forward(self, inputs, attrs):
        logits = inputs[0]
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        log_probs = _log_softmax(logits)
        loss = -log_probs[np.arange(logits.shape[0]), labels].mean()
        return np.asarray(loss, dtype=logits.dtype), log_probs

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        logits = inputs[0]
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        probs = np.exp(ctx)
        probs[np.arange(logits.shape[0]), labels] -= 1
        return (probs * (grad / logits.shape[0]),)


@register
class Pick(Op):
    """逐行取一列：out[i] = x[i, indices[i]]"""
    name = "pick"

    def check(self, inputs, attrs):
        x = inputs[0]
        idx = np.asarray(attrs["indices"])
        if x.ndim != 2 or idx.shape != (x.shape[0],):
            raise ShapeError(f"pick: 形状不兼容 x{x.shape} indices{idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
            raise ShapeError(f"pick: 索引越界, 列数 {x.shape[1]}")

    def forward(self, inputs, attrs):
        x = inputs[0]
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        return x[np.arange(x.shape[0]), idx], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        x = inputs[0]
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        dx = np.zeros_like(x)
        dx[np.arange(x.shape[0]), idx] = grad
        return (dx,)


@register
class L2Norm(Op):
    name = "l2_norm"

    def forward(self, inputs, attrs):
        x = inputs[0]
        return np.asarray(np.sqrt(np.sum(x * x)), dtype=x.dtype), None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        x = inputs[0]
        if out == 0:
            return (np.zeros_like(x),)
        return (x * (grad / out),)


@register
class Constant(Op):
    name = "constant"
    arity = 0

    def forward(self, inputs, attrs):
        return attrs["value"], None

    def backward(self, grad, inputs, out, ctx, attrs, needs):
        return ()
