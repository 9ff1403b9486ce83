from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import field_validator
from typing import Optional


class Settings(BaseSettings):
    """进程级环境配置"""

    model_config = SettingsConfigDict(env_file=".env", env_prefix="JEMLAB_", case_sensitive=True)

    # 基础配置
    PROJECT_NAME: str = "SADA-JEM 桌面实验室"
    VERSION: str = "1.0.0"

    # 日志配置
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    LOG_WALL_TIME: bool = False  # 关闭时 metrics.jsonl 在相同种子下逐字节一致
    PROGRESS_BAR: bool = True

    # 数值配置
    STRICT_NUMERICS: bool = False

    # 输出目录
    RUN_ROOT: str = "runs"

    @field_validator("LOG_LEVEL")
    @classmethod
    def check_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"不支持的日志级别: {v}")
        return level


# 创建全局设置实例
settings = Settings()


# 训练超参数默认值 (CIFAR 设置)
TRAINING_DEFAULTS = {
    "sgld_steps": 5,
    "buffer_capacity": 10_000,
    "reinit_prob": 0.05,
    "sgld_step_size": 1.0,
    "sgld_noise": 0.0,
    "sam_rho": 0.2,
    "lr": 0.1,
    "momentum": 0.9,
    "lr_milestones": (60, 120, 180),
    "lr_decay": 0.2,
    "epochs": 200,
}

# PGD 攻击默认配置
PGD_DEFAULTS = {
    "steps": 40,
    "step_ratio": 2.5,  # step_size = step_ratio * eps / steps
    "random_start": True,
}

# 评估默认配置
EVAL_DEFAULTS = {
    "ece_bins": 20,
    "landscape_fraction": 0.1,
    "landscape_cap": 4096,
    "frechet_eps": 1e-6,
}
