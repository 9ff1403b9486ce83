"""
能量地形切片
沿随机方向 d 评估 E(θ + Σ λ_i d_i) = Σ_x E_θ'(x)，可选逐输出单元的滤波归一化
"""

import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..autodiff.tensor import ParameterSet
from ..core.config import EVAL_DEFAULTS
from ..schemas.evaluation import LandscapeSlice
from .data_service import Dataset
from .eval_service import batched

logger = logging.getLogger(__name__)


def landscape_subset(dataset: Dataset, fraction: float = EVAL_DEFAULTS["landscape_fraction"],
                     cap: int = EVAL_DEFAULTS["landscape_cap"],
                     rng: Optional[np.random.Generator] = None) -> Dataset:
    """随机抽取训练数据的 fraction（不超过 cap 条）"""
    rng = rng if rng is not None else np.random.default_rng(0)
    size = min(cap, max(1, int(round(fraction * len(dataset)))))
    index = np.sort(rng.choice(len(dataset), size=size, replace=False))
    return dataset.subset(index)


def random_direction(params: ParameterSet, output_axes: Dict[str, Optional[int]], seed: int,
                     normalization: str = "filter") -> Dict[str, np.ndarray]:
    """逐参数高斯方向；filter 模式下每个输出单元切片的范数与参数切片一致"""
    rng = np.random.default_rng(seed)
    direction = {}
    for name, tensor in params.items():
        theta = tensor.data.astype(np.float64)
        d = rng.standard_normal(theta.shape)
        if normalization == "filter":
            axis = output_axes.get(name)
            if axis is None:
                # 一维参数逐元素归一化
                d = np.sign(d) * np.abs(theta)
            else:
                other = tuple(i for i in range(theta.ndim) if i != axis)
                d_norm = np.sqrt(np.sum(d * d, axis=other, keepdims=True))
                t_norm = np.sqrt(np.sum(theta * theta, axis=other, keepdims=True))
                d = d * np.where(d_norm > 0, t_norm / np.where(d_norm > 0, d_norm, 1.0), 0.0)
        elif normalization != "none":
            raise ValueError(f"未知的归一化方式: {normalization}")
        direction[name] = d
    return direction


def offset_grid(lo: float = -1.0, hi: float = 1.0, points: int = 41) -> List[float]:
    """等距网格；落在 0 附近的点取精确 0"""
    grid = np.linspace(lo, hi, points)
    step = (hi - lo) / max(points - 1, 1)
    grid[np.abs(grid) < 1e-9 * max(step, 1.0)] = 0.0
    return grid.tolist()


def _total_energy(model, x: np.ndarray) -> float:
    return float(np.sum(batched(model.energy, x).astype(np.float64)))


def landscape_slice(model, subset: Union[Dataset, np.ndarray], directions: int = 1,
                    grid: Optional[Sequence[float]] = None,
                    normalization: str = "filter", seed: int = 0) -> LandscapeSlice:
    """
    一维或二维网格上的总能量；model 需提供 params、with_params、energy 与 output_axes。
    只在副本上评估，原参数不变。
    """
    if directions not in (1, 2):
        raise ValueError(f"方向数只能为 1 或 2: {directions}")
    grid = offset_grid() if grid is None else [float(g) for g in grid]
    if 0.0 not in grid:
        raise ValueError("网格必须包含偏移 0")
    x = subset.samples if isinstance(subset, Dataset) else np.asarray(subset)
    params: ParameterSet = model.params
    seeds = [seed + i for i in range(directions)]
    dirs = [random_direction(params, model.output_axes(), s, normalization) for s in seeds]
    base = _total_energy(model, x)

    flagged: List[List[int]] = []

    def energy_at(index, offsets) -> Optional[float]:
        if all(o == 0.0 for o in offsets):
            return base
        def shift(name: str, value: np.ndarray) -> np.ndarray:
            moved = value.astype(np.float64)
            for o, d in zip(offsets, dirs):
                moved = moved + o * d[name]
            return moved
        value = _total_energy(model.with_params(params.map(shift)), x)
        if not np.isfinite(value):
            flagged.append(list(index))
            return None
        return value

    if directions == 1:
        energies = [energy_at((i,), (g,)) for i, g in enumerate(grid)]
    else:
        energies = [[energy_at((i, j), (a, b)) for j, b in enumerate(grid)] for i, a in enumerate(grid)]
    if flagged:
        logger.warning(f"地形切片中 {len(flagged)} 个网格点能量非有限")
    return LandscapeSlice(direction_seeds=seeds, offsets=[grid] * directions, energies=energies,
                          normalization=normalization, flagged=flagged, base_energy=base)
