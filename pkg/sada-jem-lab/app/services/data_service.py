"""
数据服务
合成数据集、csv2d / IDX 读写、图像增强与双数据加载器
（分类分支取增强样本，生成分支取原始样本）
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..core.errors import ConfigError, DataFormatError, ShapeError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["x1", "x2", "label"]
IDX_UBYTE = 0x08

# 各二维生成器的几何半宽（最大坐标绝对值）
TOY_EXTENT = {"gaussians8": 2.0, "rings": 2.0, "moons": 1.5}
TOY_CLASSES = {"gaussians8": 2, "rings": 2, "moons": 2}
GAUSSIANS8_RADIUS = 2.0


@dataclass
class Dataset:
    """带标签的数据集，样本已缩放到 clamp_range 内"""
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    kind: str
    split: str = "train"
    clamp_range: Tuple[float, float] = (-1.0, 1.0)
    name: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.samples.setflags(write=False)
        self.labels.setflags(write=False)
        # 区间端点取 float32 可表示值，与样本精度一致
        self.clamp_range = (float(np.float32(self.clamp_range[0])), float(np.float32(self.clamp_range[1])))
        if len(self.samples) != len(self.labels):
            raise DataFormatError(f"样本数 {len(self.samples)} 与标签数 {len(self.labels)} 不一致")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"标签越界: 类别数 {self.class_count}")
        lo, hi = self.clamp_range
        if self.samples.size and (self.samples.min() < lo or self.samples.max() > hi):
            raise DataFormatError(f"样本超出区间 [{lo}, {hi}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 4

    def subset(self, indices: np.ndarray) -> "Dataset":
        return replace(self, samples=self.samples[indices], labels=self.labels[indices])


# ---- 合成数据 ----

def toy_clamp(name: str, noise: float) -> Tuple[float, float]:
    """几何半宽 + 4 倍噪声，再放宽 10%"""
    bound = (TOY_EXTENT[name] + 4 * noise) * 1.1
    return (-bound, bound)


def toy_centers(name: str) -> Optional[np.ndarray]:
    """gaussians8 的 8 个中心；其他生成器没有离散模式"""
    if name != "gaussians8":
        return None
    angles = 2 * np.pi * np.arange(8) / 8
    return GAUSSIANS8_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synth_toy(name: str, n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """二维玩具数据：rings | gaussians8 | moons"""
    if name not in TOY_EXTENT:
        raise ConfigError(f"未知的玩具数据集: {name}")
    class_count = TOY_CLASSES[name]
    if n < class_count:
        raise ConfigError(f"样本数 {n} 少于类别数 {class_count}")

    rng = np.random.default_rng(seed)
    index = np.arange(n)
    if name == "gaussians8":
        centers = toy_centers(name)
        component = index % 8
        labels = component % 2
        points = centers[component]
    elif name == "rings":
        labels = index % 2
        angles = rng.uniform(0, 2 * np.pi, n)
        radius = np.where(labels == 0, 1.0, 2.0)
        points = radius[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        labels = index % 2
        t = rng.uniform(0, np.pi, n)
        upper = np.stack([np.cos(t) - 0.5, np.sin(t) - 0.25], axis=1)
        lower = np.stack([0.5 - np.cos(t), 0.25 - np.sin(t)], axis=1)
        points = np.where(labels[:, None] == 0, upper, lower)

    points = points + noise * rng.standard_normal((n, 2))
    clamp = toy_clamp(name, noise)
    order = rng.permutation(n)
    samples = np.clip(points[order], *clamp)
    return Dataset(samples, labels[order], class_count, kind="toy", clamp_range=clamp, name=name,
                   meta={"noise": noise, "seed": seed})


def synth_images(name: str = "bars", n: int = 2048, size: int = 16, class_count: int = 4,
                 noise: float = 0.1, seed: int = 0, channels: int = 1) -> Dataset:
    """合成图像：每类一个方向的亮条，位置随机，值域 [-1, 1]"""
    if name != "bars":
        raise ConfigError(f"未知的合成图像数据集: {name}")
    if n < class_count or class_count < 2:
        raise ConfigError(f"样本数 {n} 或类别数 {class_count} 无效")

    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    angles = np.pi * labels / class_count
    offsets = rng.uniform(-size / 4, size / 4, (n, 2))
    coords = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx = xx[None] - offsets[:, 0, None, None]
    dy = yy[None] - offsets[:, 1, None, None]
    dist = np.abs(-dx * np.sin(angles)[:, None, None] + dy * np.cos(angles)[:, None, None])
    images = -1.0 + 2.0 * np.exp(-(dist / 1.5) ** 2)
    images = images + noise * rng.standard_normal(images.shape)
    images = np.repeat(images[:, None], channels, axis=1)
    order = rng.permutation(n)
    return Dataset(np.clip(images[order], -1.0, 1.0), labels[order], class_count, kind="image",
                   name=name, meta={"noise": noise, "seed": seed, "size": size})


def shifted_toy(dataset: Dataset, shift: Union[float, np.ndarray]) -> Dataset:
    """平移后的二维数据（分布外对照）"""
    shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), dataset.shape)
    lo, hi = dataset.clamp_range
    margin = float(np.max(np.abs(shift)))
    return Dataset(dataset.samples + shift, dataset.labels, dataset.class_count, kind=dataset.kind,
                   split="ood", clamp_range=(lo - margin, hi + margin), name=f"{dataset.name}+shift")


def uniform_noise(shape: Tuple[int, ...], n: int, clamp_range: Tuple[float, float],
                  rng: np.random.Generator, class_count: int = 2) -> Dataset:
    """区间内均匀噪声（分布外对照）"""
    samples = rng.uniform(clamp_range[0], clamp_range[1], (n, *shape))
    return Dataset(samples, np.zeros(n, dtype=np.int64), class_count, kind="noise", split="ood",
                   clamp_range=tuple(clamp_range), name="uniform")


# ---- 文件读写 ----

def load_dataset(path: Union[str, Path], fmt: str = "csv2d", label_path: Optional[Union[str, Path]] = None,
                 class_count: Optional[int] = None) -> Dataset:
    """读取 csv2d 或 IDX 图像/标签文件对"""
    if fmt == "csv2d":
        return _load_csv2d(Path(path), class_count)
    if fmt == "idx-images":
        if label_path is None:
            raise ConfigError("IDX 图像需要对应的标签文件")
        return _load_idx(Path(path), Path(label_path), class_count)
    raise ConfigError(f"未知的数据格式: {fmt}")


def _load_csv2d(path: Path, class_count: Optional[int]) -> Dataset:
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataFormatError(f"CSV 解析失败: {path} ({e})") from e
    if list(frame.columns) != CSV_COLUMNS:
        raise DataFormatError(f"CSV 表头应为 {','.join(CSV_COLUMNS)}: {list(frame.columns)}", {"path": str(path)})
    if frame.isna().any().any():
        raise DataFormatError(f"CSV 存在缺失值: {path}")
    labels = frame["label"].to_numpy()
    if not np.all(np.equal(np.mod(labels, 1), 0)) or (labels.size and labels.min() < 0):
        raise DataFormatError(f"标签必须为非负整数: {path}")
    labels = labels.astype(np.int64)
    count = class_count if class_count is not None else max(int(labels.max()) + 1 if labels.size else 2, 2)
    samples = frame[["x1", "x2"]].to_numpy(dtype=np.float64).astype(np.float32)
    lo, hi = float(samples.min()), float(samples.max())
    span = max(hi - lo, 1e-6)
    return Dataset(samples, labels, count, kind="toy", clamp_range=(lo - 0.1 * span, hi + 0.1 * span),
                   name=path.stem)


def _read_idx(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise DataFormatError(f"IDX 魔数错误: {path}")
    if blob[2] != IDX_UBYTE:
        raise DataFormatError(f"IDX 只支持无符号字节: {path}")
    ndim = blob[3]
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"IDX 文件被截断: {path}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header != size:
        raise DataFormatError(f"IDX 数据长度 {len(blob) - header} 与维度 {dims} 不符: {path}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)


def _load_idx(image_path: Path, label_path: Path, class_count: Optional[int]) -> Dataset:
    pixels = _read_idx(image_path)
    labels = _read_idx(label_path)
    if pixels.ndim == 3:
        pixels = pixels[:, None]
    if pixels.ndim != 4 or labels.ndim != 1:
        raise DataFormatError(f"IDX 维度不支持: 图像 {pixels.shape}, 标签 {labels.shape}")
    if len(pixels) != len(labels):
        raise DataFormatError(f"IDX 图像数 {len(pixels)} 与标签数 {len(labels)} 不一致")
    labels = labels.astype(np.int64)
    count = class_count if class_count is not None else max(int(labels.max()) + 1 if labels.size else 2, 2)
    samples = pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
    return Dataset(samples, labels, count, kind="image", name=image_path.stem)


def write_csv2d(path: Union[str, Path], dataset: Dataset) -> Path:
    """写出 csv2d（float32 可逐位还原）"""
    if dataset.shape != (2,):
        raise ShapeError(f"csv2d 只能保存二维样本: {dataset.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"x1": dataset.samples[:, 0], "x2": dataset.samples[:, 1], "label": dataset.labels})
    frame.to_csv(path, index=False, float_format="%.9g")
    return path


def write_idx(image_path: Union[str, Path], label_path: Union[str, Path], dataset: Dataset) -> Tuple[Path, Path]:
    """写出 IDX 图像/标签文件对（[-1,1] -> 0..255）"""
    if not dataset.is_image:
        raise ShapeError(f"IDX 只能保存图像: {dataset.shape}")
    pixels = np.clip(np.rint((dataset.samples + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    paths = []
    for path, array in ((image_path, pixels), (label_path, dataset.labels.astype(np.uint8))):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
        path.write_bytes(header + array.tobytes())
        paths.append(path)
    return paths[0], paths[1]


def _parse_options(parts) -> Dict[str, str]:
    options = {}
    for part in parts:
        if "=" not in part:
            raise ConfigError(f"数据描述符选项应为 key=value: {part}")
        key, value = part.split("=", 1)
        options[key] = value
    return options


def parse_data_spec(spec: str, split: str = "train") -> Dataset:
    """
    命令行数据集描述符:
      toy:<name>:n=..:noise=..:seed=..
      synth:bars:n=..:size=..:classes=..:noise=..:seed=..
      csv:<path>
      idx:<images>:<labels>
    split="test" 时合成数据换用偏移种子并取 1/4 样本量
    """
    kind, _, rest = spec.partition(":")
    parts = rest.split(":") if rest else []
    try:
        if kind == "toy":
            if not parts:
                raise ConfigError("toy 描述符缺少数据集名称")
            opts = _parse_options(parts[1:])
            n, seed = int(opts.pop("n", 4096)), int(opts.pop("seed", 0))
            noise = float(opts.pop("noise", 0.1))
            if opts:
                raise ConfigError(f"未知的 toy 选项: {sorted(opts)}")
            if split != "train":
                n, seed = max(n // 4, TOY_CLASSES.get(parts[0], 2)), seed + 1
            dataset = synth_toy(parts[0], n=n, noise=noise, seed=seed)
        elif kind == "synth":
            if not parts:
                raise ConfigError("synth 描述符缺少数据集名称")
            opts = _parse_options(parts[1:])
            n, seed = int(opts.pop("n", 2048)), int(opts.pop("seed", 0))
            size, classes = int(opts.pop("size", 16)), int(opts.pop("classes", 4))
            noise, channels = float(opts.pop("noise", 0.1)), int(opts.pop("channels", 1))
            if opts:
                raise ConfigError(f"未知的 synth 选项: {sorted(opts)}")
            if split != "train":
                n, seed = max(n // 4, classes), seed + 1
            dataset = synth_images(parts[0], n=n, size=size, class_count=classes, noise=noise,
                                   seed=seed, channels=channels)
        elif kind == "csv":
            dataset = load_dataset(rest, "csv2d")
        elif kind == "idx":
            if len(parts) != 2:
                raise ConfigError("idx 描述符格式: idx:<images>:<labels>")
            dataset = load_dataset(parts[0], "idx-images", parts[1])
        else:
            raise ConfigError(f"未知的数据描述符: {spec}")
    except ValueError as e:
        raise ConfigError(f"数据描述符无法解析: {spec} ({e})") from e
    dataset.split = split
    logger.debug(f"加载数据集 {spec}: {len(dataset)} 条, 形状 {dataset.shape}")
    return dataset


# ---- 增强 ----

@dataclass(frozen=True)
class AugmentationPipeline:
    """水平翻转（概率 0.5）+ 填充后随机裁剪；二维数据为恒等变换"""
    flip: bool = False
    pad: int = 0
    fill: float = -1.0

    @property
    def identity(self) -> bool:
        return not self.flip and self.pad == 0

    @classmethod
    def for_dataset(cls, dataset: Dataset, flip: bool = True, pad: int = 2) -> "AugmentationPipeline":
        if not dataset.is_image:
            return cls()
        return cls(flip=flip, pad=pad, fill=dataset.clamp_range[0])


def pad_crop(x: np.ndarray, pad: int, offsets: np.ndarray, fill: float) -> np.ndarray:
    """按给定左上角偏移 (oy, ox) 从填充图像中裁剪原尺寸窗口"""
    n, _, height, width = x.shape
    if pad >= min(height, width):
        raise ConfigError(f"填充宽度 {pad} 不小于图像尺寸 {height}x{width}")
    if pad == 0:
        return x.copy()
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill)
    out = np.empty_like(x)
    for i, (oy, ox) in enumerate(offsets):
        out[i] = padded[i, :, oy:oy + height, ox:ox + width]
    return out


def augment(x: np.ndarray, pipeline: AugmentationPipeline, rng: np.random.Generator) -> np.ndarray:
    """按顺序执行翻转与裁剪，输出形状不变"""
    if pipeline.identity:
        return x
    if x.ndim != 4:
        raise ShapeError(f"翻转/裁剪只适用于图像输入: {x.shape}")
    out = np.array(x, copy=True)
    if pipeline.flip:
        mask = rng.random(len(out)) < 0.5
        out[mask] = out[mask][..., ::-1]
    if pipeline.pad:
        if pipeline.pad >= min(out.shape[2], out.shape[3]):
            raise ConfigError(f"填充宽度 {pipeline.pad} 不小于图像尺寸 {out.shape[2:]}")
        offsets = rng.integers(0, 2 * pipeline.pad + 1, size=(len(out), 2))
        out = pad_crop(out, pipeline.pad, offsets, pipeline.fill)
    return out


# ---- 双数据加载器 ----

@dataclass
class DualBatch:
    """分类分支（增强）与生成分支（原始）的成对批次"""
    clf_x: np.ndarray
    clf_y: np.ndarray
    gen_x: np.ndarray
    clf_index: np.ndarray
    gen_index: np.ndarray


class EpochExhausted(Exception):
    """本轮数据已取完（轮次边界）"""


class DualLoader:
    """两个独立打乱的加载器，共享同一数据集"""

    def __init__(self, dataset: Dataset, pipeline: AugmentationPipeline, batch_size: int,
                 rng_clf: np.random.Generator, rng_gen: np.random.Generator,
                 rng_augment: Optional[np.random.Generator] = None,
                 augment_gen: bool = False, drop_last: bool = False):
        if batch_size > len(dataset):
            raise ConfigError(f"批大小 {batch_size} 大于数据集大小 {len(dataset)}")
        self.dataset = dataset
        self.pipeline = pipeline
        self.batch_size = batch_size
        self.rng_clf = rng_clf
        self.rng_gen = rng_gen
        self.rng_augment = rng_augment if rng_augment is not None else rng_clf
        self.augment_gen = augment_gen
        self.drop_last = drop_last
        self.epoch = -1
        self._clf_order = self._gen_order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.start_epoch()

    def start_epoch(self) -> None:
        self.epoch += 1
        n = len(self.dataset)
        self._clf_order = self.rng_clf.permutation(n)
        self._gen_order = self.rng_gen.permutation(n)
        self._cursor = 0

    def batches_per_epoch(self) -> int:
        n = len(self.dataset)
        if self.drop_last:
            return n // self.batch_size
        count = -(-n // self.batch_size)
        return count - 1 if self._folds_tail() else count

    def _folds_tail(self) -> bool:
        """只剩 1 条的尾批并入前一批（批归一化训练模式至少需要 2 条）"""
        n = len(self.dataset)
        return not self.drop_last and n > self.batch_size and n % self.batch_size == 1

    def next(self) -> DualBatch:
        n = len(self.dataset)
        remaining = n - self._cursor
        if remaining <= 0 or (self.drop_last and remaining < self.batch_size):
            raise EpochExhausted(f"第 {self.epoch} 轮数据已取完")
        end = min(self._cursor + self.batch_size, n)
        if n - end == 1 and self._folds_tail():
            end = n
        clf_index = self._clf_order[self._cursor:end]
        gen_index = self._gen_order[self._cursor:end]
        self._cursor = end

        samples = self.dataset.samples
        clf_x = augment(samples[clf_index], self.pipeline, self.rng_augment)
        gen_x = samples[gen_index]
        if self.augment_gen:
            gen_x = augment(gen_x, self.pipeline, self.rng_augment)
        return DualBatch(clf_x=clf_x, clf_y=self.dataset.labels[clf_index], gen_x=gen_x,
                         clf_index=clf_index, gen_index=gen_index)

    def epoch_batches(self) -> Iterator[DualBatch]:
        """取完当前轮次的全部批次，然后开启下一轮"""
        while True:
            try:
                yield self.next()
            except EpochExhausted:
                self.start_epoch()
                return


def dual_loader_next(loader: DualLoader) -> DualBatch:
    """取下一对批次；轮次结束时抛出 EpochExhausted"""
    return loader.next()
