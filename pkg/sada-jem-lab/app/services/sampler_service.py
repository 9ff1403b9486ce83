"""
采样服务
信息初始化分布、回放缓冲区与 SGLD 链
  x_t = x_{t-1} - α ∂E(x_{t-1})/∂x_{t-1} + σ N(0, I)，每步后截断到 clamp_range
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from ..core.checkpoint import write_tensor_file
from ..core.errors import DataFormatError, DivergenceError, ShapeError
from ..schemas.training import SgldConfig
from .data_service import Dataset

logger = logging.getLogger(__name__)

DEFAULT_CLAMP = (-1.0, 1.0)


class EnergyFunction(Protocol):
    """能提供逐样本能量及其输入梯度的对象（LogitModel 满足）"""

    def input_gradient(self, x: np.ndarray, conditional_class=None) -> Tuple[np.ndarray, np.ndarray]:
        ...


@dataclass
class InitDistribution:
    """逐类对角高斯 p0(x)，类先验均匀"""
    means: np.ndarray
    variances: np.ndarray
    floor: float
    clamp_range: Tuple[float, float]

    @property
    def class_count(self) -> int:
        return len(self.means)

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.means.shape[1:])


def fit_informative_init(dataset: Dataset, class_count: Optional[int] = None, floor: float = 1e-4) -> InitDistribution:
    """逐类经验均值与对角方差（方差下限 floor）"""
    class_count = class_count or dataset.class_count
    samples = dataset.samples.astype(np.float64)
    means, variances = [], []
    for c in range(class_count):
        rows = samples[dataset.labels == c]
        if len(rows) == 0:
            raise DataFormatError(f"类别 {c} 没有样本，无法拟合初始化分布", {"class": c})
        means.append(rows.mean(axis=0))
        variances.append(np.maximum(rows.var(axis=0), floor))
    return InitDistribution(np.stack(means), np.stack(variances), floor, tuple(dataset.clamp_range))


def draw_init(init: InitDistribution, n: int, rng: np.random.Generator,
              classes: Optional[Union[int, np.ndarray]] = None, dtype=np.float32) -> np.ndarray:
    """均匀选类，再按该类高斯采样并截断"""
    if classes is None:
        classes = rng.integers(0, init.class_count, size=n)
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
    noise = rng.standard_normal((n, *init.sample_shape))
    x = init.means[classes] + np.sqrt(init.variances[classes]) * noise
    return np.clip(x, *init.clamp_range).astype(dtype)


class ReplayBuffer:
    """固定容量的回放缓冲区；写满后随机覆盖一个槽位"""

    def __init__(self, capacity: int, sample_shape: Sequence[int], reinit_prob: float = 0.05,
                 clamp_range: Tuple[float, float] = DEFAULT_CLAMP, dtype=np.float32):
        if capacity < 1:
            raise ValueError("缓冲区容量必须为正")
        self.capacity = capacity
        self.reinit_prob = reinit_prob
        self.clamp_range = tuple(clamp_range)
        self.slots = np.zeros((capacity, *sample_shape), dtype=dtype)
        self.fill = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.fill

    def contents(self) -> np.ndarray:
        return self.slots[:self.fill]

    def draw(self, init: InitDistribution, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (链起点, 是否取自缓冲区)"""
        if self.fill == 0:
            from_buffer = np.zeros(n, dtype=bool)
        else:
            from_buffer = rng.random(n) >= self.reinit_prob
        starts = np.empty((n, *self.slots.shape[1:]), dtype=self.slots.dtype)
        picked = int(from_buffer.sum())
        if picked:
            starts[from_buffer] = self.slots[rng.integers(0, self.fill, size=picked)]
        fresh = n - picked
        if fresh:
            starts[~from_buffer] = draw_init(init, fresh, rng, dtype=self.slots.dtype)
        return starts, from_buffer

    def push(self, samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """写入样本，返回写入的槽位"""
        samples = np.clip(np.asarray(samples, dtype=self.slots.dtype), *self.clamp_range)
        if samples.shape[1:] != self.slots.shape[1:]:
            raise ShapeError(f"样本形状 {samples.shape[1:]} 与缓冲区 {self.slots.shape[1:]} 不一致")
        n = len(samples)
        appended = min(n, self.capacity - self.fill)
        slots = np.concatenate([
            np.arange(self.fill, self.fill + appended),
            rng.integers(0, self.capacity, size=n - appended),
        ]).astype(np.int64)
        for slot, sample in zip(slots, samples):
            self.slots[slot] = sample
        self.fill += appended
        self.pushed += n
        return slots


def buffer_draw(buffer: ReplayBuffer, init: InitDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    return buffer.draw(init, n, rng)[0]


def buffer_push(buffer: ReplayBuffer, samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return buffer.push(samples, rng)


def sgld_chain(model: EnergyFunction, x0: np.ndarray, cfg: SgldConfig, rng: np.random.Generator,
               conditional_class: Optional[Union[int, np.ndarray]] = None,
               energy_trace: Optional[List[float]] = None) -> np.ndarray:
    """K 步 SGLD；σ=0 时不消耗随机数"""
    lo, hi = cfg.clamp_range or DEFAULT_CLAMP
    x = np.array(x0, copy=True)
    for step in range(cfg.k):
        energies, grad = model.input_gradient(x, conditional_class)
        if not np.all(np.isfinite(grad)) or not np.all(np.isfinite(energies)):
            raise DivergenceError(f"SGLD 第 {step} 步梯度出现非有限值", step=step, reason="SGLD_NON_FINITE")
        if energy_trace is not None:
            energy_trace.append(float(np.mean(energies)))
        x = x - cfg.step_size * grad.astype(x.dtype, copy=False)
        if cfg.noise > 0:
            x = x + cfg.noise * rng.standard_normal(x.shape).astype(x.dtype)
        x = np.clip(x, lo, hi)
    return x


def rank_samples(model, samples: np.ndarray, by: str = "px") -> Tuple[np.ndarray, np.ndarray]:
    """按 -E(x)（px）或 max_y p(y|x)（pyx）降序排列，返回 (顺序, 得分)"""
    if len(samples) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    if by == "px":
        scores = -model.energy(samples)
    elif by == "pyx":
        logits = model.forward_logits(samples).astype(np.float64)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        scores = (shifted / shifted.sum(axis=1, keepdims=True)).max(axis=1)
    else:
        raise ValueError(f"未知的排序方式: {by}")
    return np.argsort(-scores, kind="stable"), scores


def write_sample_dump(path: Union[str, Path], samples: np.ndarray, scores: Optional[np.ndarray] = None,
                      classes: Optional[np.ndarray] = None) -> Path:
    """样本转储（与检查点相同的张量文件格式）"""
    samples = np.asarray(samples)
    dtype = samples.dtype if samples.dtype in (np.float32, np.float64) else np.float32
    entries = {"samples": samples}
    if scores is not None:
        entries["scores"] = np.asarray(scores)
    if classes is not None:
        entries["classes"] = np.asarray(classes)
    return write_tensor_file(path, entries, dtype=dtype)


def write_raster_grid(path: Union[str, Path], samples: np.ndarray,
                      clamp_range: Tuple[float, float] = DEFAULT_CLAMP, columns: Optional[int] = None) -> Optional[Path]:
    """图像样本拼成网格，单通道写 PGM，三通道写 PPM"""
    samples = np.asarray(samples)
    if samples.ndim != 4 or samples.shape[1] not in (1, 3):
        raise ShapeError(f"栅格转储只支持 1 或 3 通道图像: {samples.shape}")
    n, channels, height, width = samples.shape
    if n == 0:
        return None
    columns = columns or int(np.ceil(np.sqrt(n)))
    rows = -(-n // columns)
    lo, hi = clamp_range
    pixels = np.clip(np.rint((samples - lo) / (hi - lo) * 255), 0, 255).astype(np.uint8)
    grid = np.zeros((channels, rows * height, columns * width), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        grid[:, r * height:(r + 1) * height, c * width:(c + 1) * width] = pixels[i]

    path = Path(path).with_suffix(".pgm" if channels == 1 else ".ppm")
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(grid[0], mode="L") if channels == 1 else Image.fromarray(grid.transpose(1, 2, 0), mode="RGB")
    image.save(path, format="PPM")
    return path


def generate_samples(model: EnergyFunction, init: InitDistribution, n: int, cfg: SgldConfig,
                     rng: np.random.Generator, conditional_class: Optional[int] = None) -> np.ndarray:
    """从信息初始化分布出发跑新链（不经过缓冲区）"""
    if n == 0:
        return np.empty((0, *init.sample_shape), dtype=np.float32)
    classes = None if conditional_class is None else np.full(n, conditional_class, dtype=np.int64)
    x0 = draw_init(init, n, rng, classes=classes)
    samples = sgld_chain(model, x0, cfg, rng, conditional_class=classes)
    logger.info(f"生成样本 {n} 个, K={cfg.k}" + ("" if conditional_class is None else f", 类别 {conditional_class}"))
    return samples
