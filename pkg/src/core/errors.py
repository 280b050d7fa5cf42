# src/core/errors.py

"""
全局异常定义 - 所有模块抛出的业务异常都继承自 LfaError
每个异常类型自带 CLI 退出码，router 层只需统一捕获 LfaError 即可
"""

# --- 退出码约定 ---
EXIT_OK = 0
EXIT_FAILURE = 1  # 校验失败 / 评估失败 / 数据错误
EXIT_USAGE = 2    # 参数或配置错误
EXIT_IO = 3       # 文件读写 / checkpoint 错误


class LfaError(Exception):
    """所有业务异常的基类"""
    exit_code: int = EXIT_FAILURE


# --- 形状与配置 ---

class ShapeError(LfaError, ValueError):
    """张量形状不匹配"""


class ConfigError(LfaError, ValueError):
    """配置自相矛盾或取值非法"""
    exit_code = EXIT_USAGE


class DomainError(LfaError, ValueError):
    """输入超出定义域 (例如概率不在 (0,1) 内)"""


class AblationLookupError(LfaError, LookupError):
    """未知的消融实验配置名"""
    exit_code = EXIT_USAGE


# --- 数值与数据 ---

class DataError(LfaError):
    """数据集为空或样本不一致"""


class EvaluationError(LfaError):
    """梯度校验时函数值不是有限数"""


class NumericalError(LfaError):
    """前向计算或损失出现 NaN/Inf"""


class NonFiniteGradientError(NumericalError):
    """梯度含 NaN/Inf，本次优化步被拒绝"""


# --- 文件读写 ---

class LfaIOError(LfaError, OSError):
    exit_code = EXIT_IO


class ImageReadError(LfaIOError):
    """图像无法读取或位深不支持"""


class CheckpointError(LfaIOError):
    pass


class CheckpointFormatError(CheckpointError):
    """文件头魔数不对，不是本项目的 checkpoint"""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass
