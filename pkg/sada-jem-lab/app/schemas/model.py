from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


class ArchOptions(BaseModel):
    """网络结构选项（输入形状与类别数由数据集决定）"""
    model_config = {"extra": "forbid"}

    arch: Literal["auto", "mlp", "cnn"] = Field("auto", description="auto: 二维数据用 MLP, 图像用 CNN")
    hidden: Optional[List[int]] = Field(None, description="全连接隐藏层宽度")
    channels: List[int] = Field([16, 32], description="卷积块通道数")
    norm: Literal["none", "batchnorm"] = Field("none", description="归一化方式")
    activation: Literal["relu", "leaky_relu"] = Field("relu", description="激活函数")
    dtype: Literal["float32", "float64"] = Field("float32", description="计算精度")
    pool: bool = Field(True, description="卷积块后 2x2 平均池化")


class ModelConfig(BaseModel):
    """分类网络配置"""
    model_config = {"extra": "forbid"}

    input_shape: Tuple[int, ...] = Field(..., description="(d,) 或 (C, H, W)")
    class_count: int = Field(..., ge=2, description="类别数 C")
    arch: Literal["mlp", "cnn"] = "mlp"
    hidden: List[int] = Field([128, 128], description="全连接隐藏层宽度")
    channels: List[int] = Field([16, 32], description="卷积块通道数")
    norm: Literal["none", "batchnorm"] = "none"
    activation: Literal["relu", "leaky_relu"] = "relu"
    dtype: Literal["float32", "float64"] = "float32"
    pool: bool = True

    @model_validator(mode="after")
    def check_layout(self) -> "ModelConfig":
        if len(self.input_shape) not in (1, 3) or any(e <= 0 for e in self.input_shape):
            raise ValueError(f"输入形状必须为 (d,) 或 (C, H, W): {self.input_shape}")
        if any(w <= 0 for w in self.hidden) or any(c <= 0 for c in self.channels):
            raise ValueError("层宽度必须为正数")
        if self.arch == "cnn":
            if self.input_kind != "image":
                raise ValueError("CNN 只接受图像输入")
            if not self.channels:
                raise ValueError("CNN 至少需要一个卷积块")
            if self.pool:
                factor = 2 ** len(self.channels)
                _, h, w = self.input_shape
                if h % factor or w % factor:
                    raise ValueError(f"图像边长必须能被 {factor} 整除才能逐块池化")
        return self

    @property
    def input_kind(self) -> str:
        return "flat" if len(self.input_shape) == 1 else "image"

    @classmethod
    def from_options(cls, options: ArchOptions, input_shape: Tuple[int, ...], class_count: int) -> "ModelConfig":
        """由结构选项与数据集元信息构造"""
        arch = options.arch
        if arch == "auto":
            arch = "cnn" if len(input_shape) == 3 else "mlp"
        hidden = options.hidden
        if hidden is None:
            hidden = [128, 128] if arch == "mlp" else [128]
        return cls(
            input_shape=tuple(input_shape),
            class_count=class_count,
            arch=arch,
            hidden=list(hidden),
            channels=list(options.channels),
            norm=options.norm,
            activation=options.activation,
            dtype=options.dtype,
            pool=options.pool,
        )
