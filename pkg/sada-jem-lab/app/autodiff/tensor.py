import hashlib
from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union["Tensor", np.ndarray, float, int, list, tuple]


class Tensor:
    """只读稠密张量（行主序、连续存储）"""

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None):
        if isinstance(data, Tensor):
            data = data._data
        array = np.asarray(data)
        if dtype is not None:
            target = np.dtype(dtype)
        elif array.dtype in FLOAT_DTYPES:
            target = array.dtype
        else:
            target = np.dtype(np.float64)
        if target not in FLOAT_DTYPES:
            raise TypeError(f"只支持 32/64 位浮点张量, 实际: {target}")
        if array.dtype != target or array.flags.writeable or not array.flags.c_contiguous:
            array = np.array(array, dtype=target, order="C", copy=True)
        array.setflags(write=False)
        self._data = array

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        """只读视图"""
        return self._data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._data)))

    def astype(self, dtype: Union[str, np.dtype]) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def as_array(value: ArrayLike) -> np.ndarray:
    """绑定值 -> numpy 数组（不复制 Tensor）"""
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value)


class ParameterSet:
    """有序参数集合 θ，名称唯一，迭代顺序稳定"""

    def __init__(self, entries: Optional[Union[Mapping[str, ArrayLike], Iterable[Tuple[str, ArrayLike]]]] = None):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        items = entries.items() if isinstance(entries, Mapping) else (entries or [])
        for name, value in items:
            if name in self._entries:
                raise ValueError(f"参数名重复: {name}")
            self._entries[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def arrays(self) -> Dict[str, np.ndarray]:
        """名称 -> 只读数组"""
        return OrderedDict((name, t.data) for name, t in self._entries.items())

    def replace(self, updates: Mapping[str, ArrayLike]) -> "ParameterSet":
        """返回替换部分条目后的新参数集"""
        unknown = set(updates) - set(self._entries)
        if unknown:
            raise KeyError(f"未知参数: {sorted(unknown)}")
        return ParameterSet((name, updates[name] if name in updates else t) for name, t in self._entries.items())

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet((name, Tensor(fn(name, t.data), dtype=t.dtype)) for name, t in self._entries.items())

    def add_scaled(self, direction: Mapping[str, ArrayLike], scale: float = 1.0) -> "ParameterSet":
        """θ + scale·d（未出现在 d 中的条目保持不变）"""
        def shift(name: str, value: np.ndarray) -> np.ndarray:
            if name not in direction:
                return value
            return value + scale * as_array(direction[name]).astype(value.dtype)
        return self.map(shift)

    def global_norm(self) -> float:
        """拼接全部条目后的 L2 范数（64 位累加）"""
        total = sum(float(np.sum(np.square(t.data, dtype=np.float64))) for t in self._entries.values())
        return float(np.sqrt(total))

    def checksum(self) -> str:
        """名称与字节的 sha256，用于逐位恢复校验"""
        digest = hashlib.sha256()
        for name, t in self._entries.items():
            digest.update(name.encode("utf-8"))
            digest.update(str(t.shape).encode("ascii"))
            digest.update(t.data.tobytes())
        return digest.hexdigest()

    def __repr__(self) -> str:
        return f"ParameterSet({', '.join(f'{n}{tuple(t.shape)}' for n, t in self._entries.items())})"
