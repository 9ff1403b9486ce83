"""
优化服务
SGD 动量、SAM / ASAM 扰动、两遍锐度感知更新与学习率调度
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from ..autodiff.graph import Graph, Node, gradient
from ..autodiff.tensor import ParameterSet
from ..core.errors import DivergenceError, ShapeError
from ..schemas.training import OptimConfig, SamConfig

logger = logging.getLogger(__name__)

LossFn = Callable[[ParameterSet], Tuple[Graph, Node]]


@dataclass
class OptState:
    """动量缓冲区与调度参数"""
    momentum: float
    base_lr: float
    schedule: str = "step"
    milestones: Tuple[int, ...] = (60, 120, 180)
    decay: float = 0.2
    total_epochs: int = 200
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def create(cls, params: ParameterSet, cfg: OptimConfig, total_epochs: int) -> "OptState":
        buffers = {name: np.zeros_like(t.data) for name, t in params.items()}
        return cls(momentum=cfg.momentum, base_lr=cfg.lr, schedule=cfg.schedule,
                   milestones=tuple(cfg.milestones), decay=cfg.decay, total_epochs=total_epochs,
                   buffers=buffers)


@dataclass
class SamStepResult:
    """一次更新的损失与梯度信息"""
    loss: float
    perturbed_loss: Optional[float]
    grad_norm: float
    lr: float
    degenerate: bool = False


def schedule_lr(opt: OptState, epoch: int) -> float:
    """step: lr0·decay^(已过里程碑数)；cosine: lr0·½(1+cos(π·epoch/total))"""
    if epoch < 0:
        raise ValueError(f"epoch 不能为负: {epoch}")
    if opt.schedule == "cosine":
        progress = min(epoch, opt.total_epochs) / opt.total_epochs
        return opt.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    passed = sum(1 for m in opt.milestones if epoch >= m)
    return opt.base_lr * opt.decay ** passed


def _global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def sam_perturbation(grads: Mapping[str, np.ndarray], rho: float) -> Tuple[Dict[str, np.ndarray], bool]:
    """ε = ρ·g/‖g‖（全局 L2 范数）；梯度全零时返回零扰动并标记"""
    if not grads:
        raise ValueError("梯度为空")
    norm = _global_norm(grads)
    if norm == 0.0:
        logger.warning("梯度全零，SAM 扰动退化为 0")
        return {name: np.zeros_like(g) for name, g in grads.items()}, True
    scale = rho / norm
    return {name: (np.asarray(g, dtype=np.float64) * scale).astype(g.dtype) for name, g in grads.items()}, False


def asam_perturbation(params: ParameterSet, grads: Mapping[str, np.ndarray], rho: float) -> Dict[str, np.ndarray]:
    """ε_i = ρ·|θ_i|·sign(g_i)"""
    if set(params.names()) != set(grads):
        raise ShapeError(f"参数与梯度名称不一致: {sorted(set(params.names()) ^ set(grads))}")
    offsets = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"参数 {name} 与梯度形状不一致: {theta.shape} vs {g.shape}")
        offsets[name] = (rho * np.abs(theta.data) * np.sign(g)).astype(theta.dtype)
    return offsets


def sgd_momentum_update(params: ParameterSet, grads: Mapping[str, np.ndarray], opt: OptState,
                        lr: float, weight_decay: float = 0.0) -> ParameterSet:
    """buf ← μ·buf + (g + 2λθ)，θ ← θ − lr·buf"""
    updated = {}
    for name, theta in params.items():
        g = grads[name]
        if weight_decay:
            g = g + (2.0 * weight_decay) * theta.data
        buf = opt.momentum * opt.buffers[name] + g
        opt.buffers[name] = buf
        updated[name] = theta.data - lr * buf
    opt.step_count += 1
    return params.replace(updated)


def _evaluated_loss(loss_fn: LossFn, params: ParameterSet, step: int, which: str) -> Tuple[Graph, Node, float]:
    graph, loss = loss_fn(params)
    value = float(graph.value(loss))
    if not math.isfinite(value):
        raise DivergenceError(f"{which}损失出现非有限值", step=step, reason="LOSS_NON_FINITE")
    return graph, loss, value


def sharpness_aware_step(model, loss_fn: LossFn, cfg: SamConfig, opt: OptState, epoch: int) -> SamStepResult:
    """
    两遍更新:
      1) ∇L(θ)  2) 按变体构造 ε  3) 在 θ+ε 处重算梯度
      4) 回到 θ，以 g + 2λθ 做 SGD 动量更新
    model 只需提供可读写的 params 属性
    """
    lr = schedule_lr(opt, epoch)
    params: ParameterSet = model.params
    names = params.names()

    graph, loss, loss_value = _evaluated_loss(loss_fn, params, opt.step_count, "")
    grads = gradient(graph, loss, names)
    grad_norm = _global_norm(grads)

    perturbed_value = None
    degenerate = False
    if cfg.variant != "none":
        if cfg.variant == "sam":
            offsets, degenerate = sam_perturbation(grads, cfg.rho)
        else:
            offsets = asam_perturbation(params, grads, cfg.rho)
            degenerate = not any(np.any(v) for v in offsets.values())
        graph, loss, perturbed_value = _evaluated_loss(loss_fn, params.add_scaled(offsets), opt.step_count, "扰动后")
        grads = gradient(graph, loss, names)

    model.params = sgd_momentum_update(params, grads, opt, lr, cfg.weight_decay)
    return SamStepResult(loss=loss_value, perturbed_loss=perturbed_value, grad_norm=grad_norm,
                         lr=lr, degenerate=degenerate)
