# -*- coding: utf-8 -*-
"""
错误处理工具模块
提供统一的异常层次、错误提示和退出码映射
"""

import logging
import traceback
from typing import Any, Callable, Dict, List, Optional


# 退出码约定：0 成功，1 输入/用法错误，2 不变量/审计失败
EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_INVARIANT_ERROR = 2


class RelayError(Exception):
    """所有中继网络错误的基类"""

    code = "RELAY_ERROR"
    exit_code = EXIT_INPUT_ERROR

    def __init__(self, message: str = "", **details: Any):
        self.message = message or self.__class__.__name__
        self.details = details
        super().__init__(f"[{self.code}] {self.message}")


# ------------------------------------------------------------------ #
# 密钥表
# ------------------------------------------------------------------ #
class KeyStoreError(RelayError):
    code = "KEY_STORE"


class KeyExhausted(KeyStoreError):
    code = "KEY_EXHAUSTED"


class UnknownKeyId(KeyStoreError):
    code = "UNKNOWN_KEY_ID"


class KeyAlreadyUsed(KeyStoreError):
    code = "KEY_ALREADY_USED"


class DuplicateKeyId(KeyStoreError):
    code = "DUPLICATE_KEY_ID"


class MalformedBlock(KeyStoreError, ValueError):
    code = "MALFORMED_BLOCK"


class TableFormatError(KeyStoreError):
    code = "TABLE_FORMAT"


# ------------------------------------------------------------------ #
# 密钥源
# ------------------------------------------------------------------ #
class FeedError(RelayError):
    code = "FEED"


class FrameError(FeedError):
    code = "FRAME"


class BadMagic(FrameError):
    code = "BAD_MAGIC"


class BadCrc(FrameError):
    code = "BAD_CRC"


class SinkWriteError(FeedError):
    code = "SINK_WRITE"


# ------------------------------------------------------------------ #
# 经典信道
# ------------------------------------------------------------------ #
class WireError(RelayError):
    code = "WIRE"


class BadAuthTag(WireError):
    code = "BAD_AUTH_TAG"


class BadLength(WireError):
    code = "BAD_LENGTH"


class StaleSequence(WireError):
    code = "STALE_SEQUENCE"


class BadPayload(WireError):
    code = "BAD_PAYLOAD"


class UnknownMessageType(WireError):
    code = "UNKNOWN_MESSAGE_TYPE"


class TransferError(RelayError):
    code = "TRANSFER"


class DigestMismatch(TransferError):
    code = "DIGEST_MISMATCH"


# ------------------------------------------------------------------ #
# 遥测、场景、运行
# ------------------------------------------------------------------ #
class TelemetryError(RelayError):
    code = "TELEMETRY"


class OutOfOrder(TelemetryError):
    code = "OUT_OF_ORDER"


class EmptySeries(TelemetryError, ValueError):
    code = "EMPTY_SERIES"


class ScenarioError(RelayError):
    """场景校验失败，errors 保存全部校验错误而不仅是第一个"""

    code = "SCENARIO"

    def __init__(self, errors: List[str], source: str = ""):
        self.errors = list(errors)
        self.source = source
        summary = "; ".join(self.errors) if self.errors else "未知场景错误"
        super().__init__(f"{source + ': ' if source else ''}{summary}")


class InvariantViolation(RelayError):
    code = "INVARIANT"
    exit_code = EXIT_INVARIANT_ERROR

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


class AuditError(RelayError):
    """审计日志格式错误"""

    code = "AUDIT"


class ErrorHandler:
    """统一错误处理器"""

    def __init__(self, logger: Optional[logging.Logger] = None, echo: Callable[[str], None] = print):
        self.logger = logger or logging.getLogger(__name__)
        self.echo = echo

    def handle_scenario_error(self, error: ScenarioError) -> int:
        """处理场景校验错误，逐条列出"""
        self.echo(f"❌ 场景校验失败{'：' + error.source if error.source else ''}")
        for item in error.errors:
            self.echo(f"   - {item}")
        self.logger.error(f"场景校验失败: {error.errors}")
        return EXIT_INPUT_ERROR

    def handle_file_error(self, error: Exception, filename: str, operation: str) -> int:
        """处理文件相关错误"""
        error_msg = f"文件操作失败: {filename} - {operation}"

        if isinstance(error, PermissionError):
            error_msg += " - 文件权限不足，请检查文件访问权限"
        elif isinstance(error, FileNotFoundError):
            error_msg += " - 文件不存在，请检查文件路径"
        elif isinstance(error, IsADirectoryError):
            error_msg += " - 路径是目录而不是文件"
        else:
            error_msg += f" - {error}"

        self.logger.error(error_msg)
        self.echo(f"❌ {error_msg}")
        return EXIT_INPUT_ERROR

    def handle_invariant_violation(self, error: InvariantViolation) -> int:
        """处理不变量违反，运行中止"""
        self.logger.error(f"不变量违反 [{error.invariant}]: {traceback.format_exc()}")
        self.echo(f"❌ 不变量违反: {error}")
        return EXIT_INVARIANT_ERROR

    def exit_code_for(self, error: BaseException) -> int:
        """根据异常类型给出稳定的退出码"""
        if isinstance(error, RelayError):
            return error.exit_code
        if isinstance(error, (OSError, ValueError, KeyError)):
            return EXIT_INPUT_ERROR
        return EXIT_INVARIANT_ERROR

    def show_user_friendly_error(self, error: BaseException, context: str = "操作") -> None:
        """显示用户友好的错误信息"""
        if isinstance(error, FileNotFoundError):
            self.echo(f"❌ 文件未找到: {error.filename}")
        elif isinstance(error, PermissionError):
            self.echo("❌ 权限不足，请检查文件访问权限")
        elif isinstance(error, ScenarioError):
            self.handle_scenario_error(error)
        elif isinstance(error, ConnectionError):
            self.echo("❌ 连接失败，请检查节点地址与端口")
        elif isinstance(error, TimeoutError):
            self.echo("❌ 操作超时，请稍后重试")
        else:
            self.echo(f"❌ {context}失败: {error}")

    def log_and_show_error(self, error: BaseException, operation: str,
                           show_to_user: bool = True) -> int:
        """记录错误并显示给用户，返回对应退出码"""
        self.logger.error(f"{operation}失败: {error}")
        self.logger.debug(f"异常详情: {traceback.format_exc()}")

        if show_to_user:
            self.show_user_friendly_error(error, operation)
        return self.exit_code_for(error)


def describe_counters(counters: Dict[str, int]) -> str:
    """把计数器格式化为一行日志文本"""
    return ", ".join(f"{key}={value}" for key, value in sorted(counters.items()) if value)
