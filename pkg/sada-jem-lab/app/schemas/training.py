from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from ..core.config import TRAINING_DEFAULTS


class SgldConfig(BaseModel):
    """SGLD 采样配置"""
    model_config = {"extra": "forbid"}

    k: int = Field(TRAINING_DEFAULTS["sgld_steps"], ge=0, description="步数 K")
    step_size: float = Field(TRAINING_DEFAULTS["sgld_step_size"], ge=0, description="步长 α")
    noise: float = Field(TRAINING_DEFAULTS["sgld_noise"], ge=0, description="噪声 σ")
    clamp_range: Optional[Tuple[float, float]] = Field(None, description="截断区间，缺省时取数据集区间")

    @field_validator("clamp_range")
    @classmethod
    def check_range(cls, v):
        if v is not None and not v[0] < v[1]:
            raise ValueError(f"截断区间必须满足 lo < hi: {v}")
        return v


class SamConfig(BaseModel):
    """锐度感知优化配置"""
    model_config = {"extra": "forbid"}

    variant: Literal["none", "sam", "asam"] = "sam"
    rho: float = Field(TRAINING_DEFAULTS["sam_rho"], ge=0, description="扰动半径 ρ")
    weight_decay: float = Field(0.0, ge=0, description="权重衰减 λ")

    @model_validator(mode="after")
    def check_rho(self) -> "SamConfig":
        if self.variant != "none" and self.rho <= 0:
            raise ValueError("启用 SAM/ASAM 时 rho 必须大于 0")
        return self


class OptimConfig(BaseModel):
    """SGD 动量与学习率调度"""
    model_config = {"extra": "forbid"}

    lr: float = Field(TRAINING_DEFAULTS["lr"], gt=0)
    momentum: float = Field(TRAINING_DEFAULTS["momentum"], ge=0, lt=1)
    schedule: Literal["step", "cosine"] = "step"
    milestones: List[int] = Field(list(TRAINING_DEFAULTS["lr_milestones"]))
    decay: float = Field(TRAINING_DEFAULTS["lr_decay"], gt=0, le=1)

    @field_validator("milestones")
    @classmethod
    def check_milestones(cls, v: List[int]) -> List[int]:
        if any(b <= a for a, b in zip(v, v[1:])) or any(m < 0 for m in v):
            raise ValueError(f"里程碑必须为递增的非负整数: {v}")
        return v


class TrainConfig(BaseModel):
    """训练循环配置"""
    model_config = {"extra": "forbid"}

    epochs: int = Field(TRAINING_DEFAULTS["epochs"], ge=1)
    batch_size: int = Field(64, ge=1)
    sgld: SgldConfig = Field(default_factory=SgldConfig)
    sam: SamConfig = Field(default_factory=SamConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    reinit_prob: float = Field(TRAINING_DEFAULTS["reinit_prob"], ge=0, le=1, description="重初始化概率 γ")
    buffer_capacity: int = Field(TRAINING_DEFAULTS["buffer_capacity"], ge=1)
    gen_weight: float = Field(1.0, ge=0, description="生成项权重")
    energy_l2: float = Field(0.0, ge=0, description="能量 L2 正则权重")
    augment: bool = Field(True, description="分类分支数据增强")
    augment_gen: bool = Field(False, description="生成分支也做增强（消融用）")
    flip: bool = Field(True, description="水平翻转")
    crop_pad: int = Field(2, ge=0, description="填充后随机裁剪的填充宽度")
    checkpoint_every: int = Field(10, ge=1)
    energy_bound: float = Field(1e3, gt=0, description="|E(x⁻)| 上限")
    xent_bound: float = Field(50.0, gt=0, description="交叉熵上限")
    baseline: Literal["jem", "softmax"] = "jem"
    init_floor: float = Field(1e-4, gt=0, description="信息初始化方差下限")
    seed: int = Field(0, ge=0)


class StepMetrics(BaseModel):
    """单步训练指标"""
    step: int
    epoch: int
    xent: float
    e_pos: Optional[float] = None
    e_neg: Optional[float] = None
    gen_loss: Optional[float] = None
    total_loss: float
    perturbed_loss: Optional[float] = None
    grad_norm: float
    lr: float
    sam_degenerate: bool = False
    wall_time: Optional[float] = None
