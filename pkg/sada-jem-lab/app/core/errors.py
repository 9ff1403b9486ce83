"""
SADA-JEM 实验室错误处理模块
统一的异常层级、错误码模板、退出码映射和错误统计
"""

import json
import logging
import traceback
from datetime import datetime
from enum import Enum
from functools import wraps
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class ErrorLevel(Enum):
    """错误级别"""
    INFO = "info"
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """错误分类"""
    USER_INPUT = "user_input"
    NUMERICAL_ERROR = "numerical_error"
    GRAPH_ERROR = "graph_error"
    IO_ERROR = "io_error"
    TRAINING_ERROR = "training_error"
    SYSTEM_ERROR = "system_error"


class ExitCode:
    """进程退出码"""
    SUCCESS = 0
    DIVERGENCE = 1
    USAGE = 2
    IO = 3


class JemLabError(Exception):
    """实验室异常基类"""

    code = "SYSTEM_ERROR"

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.context = context or {}


class ShapeError(JemLabError):
    """张量形状不匹配"""
    code = "SHAPE_MISMATCH"


class UnboundInputError(JemLabError):
    """计算图输入未绑定"""
    code = "UNBOUND_INPUT"


class NonFiniteError(JemLabError):
    """出现 NaN/Inf"""
    code = "NON_FINITE"


class GraphStateError(JemLabError):
    """计算图状态错误（未求值、非标量输出等）"""
    code = "GRAPH_STATE"


class DataFormatError(JemLabError):
    """数据文件格式错误"""
    code = "DATA_FORMAT"


class CheckpointError(JemLabError):
    """检查点读写错误"""
    code = "CHECKPOINT"


class ConfigError(JemLabError):
    """配置错误"""
    code = "CONFIG_INVALID"


class DivergenceError(JemLabError):
    """训练或采样发散"""
    code = "DIVERGENCE"

    def __init__(self, message: str, step: Optional[int] = None, reason: str = "NON_FINITE",
                 trace: Optional[list] = None, snapshot: Optional[str] = None,
                 context: Optional[Dict[str, Any]] = None):
        super().__init__(message, context)
        self.step = step
        self.reason = reason
        self.trace = trace or []
        self.snapshot = snapshot


ERROR_MESSAGES: Dict[str, Dict[str, str]] = {
    "SHAPE_MISMATCH": {
        "title": "张量形状不匹配",
        "message": "运算输入的形状不兼容",
        "suggestion": "请检查数据集与检查点的输入形状、类别数是否一致",
    },
    "UNBOUND_INPUT": {
        "title": "计算图输入未绑定",
        "message": "求值时缺少占位符的绑定值",
        "suggestion": "请确认所有参数与输入均已传入 bindings",
    },
    "NON_FINITE": {
        "title": "数值溢出",
        "message": "计算结果中出现 NaN 或 Inf",
        "suggestion": "请减小学习率或 SGLD 步长，或开启能量 L2 正则",
    },
    "GRAPH_STATE": {
        "title": "计算图状态错误",
        "message": "计算图尚未求值或输出不是标量",
        "suggestion": "请先调用 evaluate 再求梯度",
    },
    "DATA_FORMAT": {
        "title": "数据格式错误",
        "message": "数据文件无法解析",
        "suggestion": "csv2d 需要表头 x1,x2,label；IDX 需要合法的魔数与长度",
    },
    "CHECKPOINT": {
        "title": "检查点读写失败",
        "message": "检查点文件缺失或已损坏",
        "suggestion": "请确认路径正确且文件以 JEMLAB01 开头",
    },
    "CONFIG_INVALID": {
        "title": "配置无效",
        "message": "配置项未注册或取值非法",
        "suggestion": "使用 --help 查看全部可用配置项",
    },
    "DIVERGENCE": {
        "title": "训练发散",
        "message": "能量或损失超出阈值，训练已中止",
        "suggestion": "查看运行目录中的 diagnostic.json，尝试减小 rho 或增大 SGLD 步数",
    },
    "IO_ERROR": {
        "title": "文件读写失败",
        "message": "无法读取或写入文件",
        "suggestion": "请检查路径与权限",
    },
}

_CATEGORY = {
    "SHAPE_MISMATCH": ErrorCategory.USER_INPUT,
    "UNBOUND_INPUT": ErrorCategory.GRAPH_ERROR,
    "NON_FINITE": ErrorCategory.NUMERICAL_ERROR,
    "GRAPH_STATE": ErrorCategory.GRAPH_ERROR,
    "DATA_FORMAT": ErrorCategory.IO_ERROR,
    "CHECKPOINT": ErrorCategory.IO_ERROR,
    "CONFIG_INVALID": ErrorCategory.USER_INPUT,
    "DIVERGENCE": ErrorCategory.TRAINING_ERROR,
    "IO_ERROR": ErrorCategory.IO_ERROR,
}

_LEVEL = {
    "SHAPE_MISMATCH": ErrorLevel.ERROR,
    "UNBOUND_INPUT": ErrorLevel.ERROR,
    "NON_FINITE": ErrorLevel.ERROR,
    "GRAPH_STATE": ErrorLevel.ERROR,
    "DATA_FORMAT": ErrorLevel.ERROR,
    "CHECKPOINT": ErrorLevel.ERROR,
    "CONFIG_INVALID": ErrorLevel.WARNING,
    "DIVERGENCE": ErrorLevel.CRITICAL,
    "IO_ERROR": ErrorLevel.ERROR,
}

EXIT_CODES = {
    "DIVERGENCE": ExitCode.DIVERGENCE,
    "NON_FINITE": ExitCode.DIVERGENCE,
    "CONFIG_INVALID": ExitCode.USAGE,
    "SHAPE_MISMATCH": ExitCode.USAGE,
    "DATA_FORMAT": ExitCode.IO,
    "CHECKPOINT": ExitCode.IO,
    "IO_ERROR": ExitCode.IO,
}


class ErrorHandler:
    """统一错误处理器"""

    def __init__(self):
        self.error_stats: Dict[str, Dict[str, Any]] = {}

    def classify(self, error: Exception) -> str:
        """错误分类"""
        if isinstance(error, JemLabError):
            return error.code
        if isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
            return "IO_ERROR"
        if isinstance(error, OSError):
            return "IO_ERROR"
        if isinstance(error, ValueError):
            return "CONFIG_INVALID"
        return "SYSTEM_ERROR"

    def exit_code(self, error: Exception) -> int:
        """错误对应的进程退出码"""
        return EXIT_CODES.get(self.classify(error), ExitCode.USAGE)

    def handle_error(self, error: Exception, context: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """统一错误处理入口"""
        error_code = self.classify(error)
        info = self._format_error_response(error, error_code, context)
        self._log_error(error, error_code, info)
        self._update_error_stats(error_code)
        return info

    def _format_error_response(self, error: Exception, error_code: str,
                               context: Optional[Dict[str, Any]]) -> Dict[str, Any]:
        """格式化错误响应"""
        template = ERROR_MESSAGES.get(error_code, {
            "title": "系统错误",
            "message": "系统遇到未知错误",
            "suggestion": "请附上日志反馈问题",
        })
        merged = dict(getattr(error, "context", {}) or {})
        merged.update(context or {})
        return {
            "success": False,
            "error_code": error_code,
            "error_type": _CATEGORY.get(error_code, ErrorCategory.SYSTEM_ERROR).value,
            "error_level": _LEVEL.get(error_code, ErrorLevel.ERROR).value,
            "title": template["title"],
            "message": template["message"],
            "detail": str(error),
            "suggestion": template["suggestion"],
            "exit_code": self.exit_code(error),
            "timestamp": datetime.now().isoformat(),
            "context": merged,
        }

    def _log_error(self, error: Exception, error_code: str, info: Dict[str, Any]) -> None:
        """记录错误日志"""
        level = _LEVEL.get(error_code, ErrorLevel.ERROR)
        payload = json.dumps({k: info[k] for k in ("error_code", "detail", "context")},
                             ensure_ascii=False, default=str)
        if level == ErrorLevel.CRITICAL:
            logger.critical(f"{info['title']}: {payload}")
        elif level == ErrorLevel.ERROR:
            logger.error(f"{info['title']}: {payload}")
        elif level == ErrorLevel.WARNING:
            logger.warning(f"{info['title']}: {payload}")
        else:
            logger.info(f"{info['title']}: {payload}")
        if error_code == "SYSTEM_ERROR":
            logger.debug(traceback.format_exc())

    def _update_error_stats(self, error_code: str) -> None:
        """更新错误统计"""
        now = datetime.now().isoformat()
        stat = self.error_stats.setdefault(error_code, {"count": 0, "first_occurrence": now})
        stat["count"] += 1
        stat["last_occurrence"] = now

    def get_error_stats(self) -> Dict[str, Any]:
        """获取错误统计信息"""
        return {
            "total_errors": sum(stat["count"] for stat in self.error_stats.values()),
            "error_breakdown": self.error_stats,
        }


# 全局错误处理器实例
error_handler = ErrorHandler()


def handle_cli_errors(func):
    """子命令错误处理装饰器：异常 -> 退出码"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except Exception as e:
            info = error_handler.handle_error(e, {"command": func.__name__})
            return info["exit_code"]
    return wrapper
