from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class ReliabilityReport(BaseModel):
    """可靠性图数据与 ECE"""
    bin_edges: List[float]
    confidence: List[float] = Field(..., description="各分箱平均置信度（空箱为 0）")
    accuracy: List[float] = Field(..., description="各分箱准确率（空箱为 0）")
    counts: List[int]
    ece: float


class OodReport(BaseModel):
    """分布外检测报告"""
    method: Literal["density", "maxprob"]
    scores_in: List[float]
    scores_out: List[float]
    auroc: float = Field(..., ge=0, le=1)
    fpr_at_95_tpr: Optional[float] = None
    label: str = ""


class LandscapeSlice(BaseModel):
    """能量地形切片"""
    direction_seeds: List[int]
    offsets: List[List[float]] = Field(..., description="每个方向的网格偏移")
    energies: List = Field(..., description="一维或二维网格上的总能量 Σ E")
    normalization: Literal["filter", "none"]
    flagged: List[List[int]] = Field(default_factory=list, description="出现非有限能量的网格点")
    base_energy: float


class RobustnessPoint(BaseModel):
    """PGD 攻击下的准确率"""
    norm: Literal["linf", "l2"]
    eps: float
    accuracy: float
    max_perturbation: float


class EvalReport(BaseModel):
    """评估报告"""
    accuracy: Optional[float] = None
    reliability: Optional[ReliabilityReport] = None
    ood: List[OodReport] = Field(default_factory=list)
    robustness: List[RobustnessPoint] = Field(default_factory=list)
    landscape: Optional[LandscapeSlice] = None
    feature_frechet: Optional[float] = None
    mode_coverage: Optional[int] = None
    extra: Dict[str, float] = Field(default_factory=dict)
