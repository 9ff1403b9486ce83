"""
消融扫描
在配置网格上逐点训练，汇总准确率、ECE、特征 Fréchet 距离与发散标记到 sweep.csv
"""

import itertools
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import pandas as pd

from ..core.errors import DivergenceError
from ..schemas.run import RunConfig, build_run_config, resolve_key
from .data_service import Dataset
from .report_service import write_frame
from .trainer_service import train

logger = logging.getLogger(__name__)

SWEEP_AXES = ("train.sam.variant", "train.sam.rho", "train.augment_gen", "train.energy_l2", "train.sgld.k",
              "train.seed")


def sweep_points(axes: Mapping[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """网格的笛卡尔积（键先展开为完整路径）"""
    resolved = {resolve_key(k): list(v) for k, v in axes.items()}
    unsupported = [k for k in resolved if k not in SWEEP_AXES]
    if unsupported:
        logger.warning(f"非常规的扫描维度: {unsupported}")
    keys = list(resolved)
    return [dict(zip(keys, values)) for values in itertools.product(*(resolved[k] for k in keys))]


def run_sweep(base: RunConfig, axes: Mapping[str, Sequence[Any]], train_ds: Dataset,
              test_ds: Optional[Dataset], out_dir: Union[str, Path]) -> pd.DataFrame:
    """每个网格点一次完整训练；发散的点记录下来而不中断扫描"""
    out_dir = Path(out_dir)
    rows = []
    points = sweep_points(axes)
    logger.info(f"开始扫描: {len(points)} 个网格点")
    for index, point in enumerate(points):
        config = build_run_config(overrides=point, base=base)
        run_dir = out_dir / f"point_{index:03d}"
        row: Dict[str, Any] = {"point": index, **point}
        try:
            result = train(config, train_ds, test_ds, run_dir)
            row.update(diverged=False, reason=None, step=None, accuracy=result.report.accuracy,
                       ece=result.report.reliability.ece, feature_frechet=result.report.feature_frechet)
        except DivergenceError as e:
            logger.warning(f"网格点 {index} 发散: {e.reason}")
            row.update(diverged=True, reason=e.reason, step=e.step, accuracy=None, ece=None, feature_frechet=None)
        rows.append(row)

    frame = pd.DataFrame(rows)
    write_frame(frame, out_dir / "sweep.csv")
    logger.info(f"扫描完成: {frame['diverged'].sum() if len(frame) else 0} 个点发散")
    return frame
