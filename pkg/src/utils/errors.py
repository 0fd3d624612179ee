"""异常定义"""

from pathlib import Path
from typing import Optional


class NashDQNError(Exception):
    """所有业务异常的基类"""


class UsageError(NashDQNError, ValueError):
    """调用方式错误（维度不匹配、对终止状态调用 step、过期的 tape 等）"""


class ConfigError(NashDQNError, ValueError):
    """配置错误，key 为出错配置项的点分路径"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(NashDQNError):
    """检查点文件损坏或与模型不匹配"""


class UnsupportedConfigError(NashDQNError):
    """求解器不支持的配置（例如平方根冲击下的解析解）"""


class SingularGameError(NashDQNError):
    """一阶条件线性方程组奇异，均衡不存在或不唯一"""


class NumericalError(NashDQNError):
    """训练中出现 NaN/inf"""

    def __init__(self, message: str, diagnostics_path: Optional[Path] = None):
        self.diagnostics_path = diagnostics_path
        super().__init__(message)
