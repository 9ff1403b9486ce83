"""
张量文件存储
JEMLAB01 二进制格式：检查点与采样转储共用
  magic(8) | dtype tag(1) | entry count(u32)
  每个条目: name length(u32) | UTF-8 name | rank(u32) | extents(u32 * rank) | 小端行主序数值
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"JEMLAB01"
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


def write_tensor_file(path: Union[str, Path], entries: Mapping[str, np.ndarray],
                      dtype: Union[str, np.dtype] = "float32") -> Path:
    """写入张量文件"""
    target = np.dtype(dtype).newbyteorder("<")
    if target not in DTYPE_TAGS:
        raise CheckpointError(f"不支持的数据类型: {dtype}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<BI", DTYPE_TAGS[target], len(entries))]
    for name, value in entries.items():
        array = np.ascontiguousarray(np.asarray(value), dtype=target)
        if not np.isfinite(array).all():
            raise CheckpointError(f"条目 {name} 含 NaN/Inf，拒绝写入: {path}", {"entry": name, "path": str(path)})
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes(order="C"))

    path.write_bytes(b"".join(chunks))
    return path


def read_tensor_file(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """读取张量文件，保持条目顺序"""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}", {"path": str(path)})

    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"魔数错误: {path}", {"path": str(path)})

    try:
        tag, count = struct.unpack_from("<BI", blob, 8)
        dtype = TAG_DTYPES[tag]
        offset = 13
        entries: Dict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            nbytes = size * dtype.itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"文件被截断: {path}")
            entries[name] = np.frombuffer(blob, dtype=dtype, count=size, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"检查点解析失败: {path} ({e})") from e

    return entries
