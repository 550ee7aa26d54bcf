"""エラーハンドラー - 例外階層とユーザー向けエラーメッセージ"""
import sys
from typing import Any, Dict, Optional
from .logger import logger


# 終了コード
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


# エラーメッセージの定義
ERROR_MESSAGES = {
    "invalid_input": {
        "title": "Invalid input",
        "message": "The input data does not satisfy the operation's requirements.",
    },
    "invalid_config": {
        "title": "Invalid configuration",
        "message": "The configuration is inconsistent or contains unknown keys.\n"
                   "Check the config file and the --set overrides.",
    },
    "invalid_state": {
        "title": "Invalid state",
        "message": "The operation was called with stale or missing state\n"
                   "(for example a backward pass without a matching forward pass).",
    },
    "out_of_range": {
        "title": "Value out of range",
        "message": "A requested physical quantity cannot be realized.",
    },
    "sampling_failure": {
        "title": "Room sampling failed",
        "message": "No room geometry satisfying the placement constraints was found.",
    },
    "sync_failure": {
        "title": "Synchronization failed",
        "message": "Cross-correlation matching could not align a channel;\n"
                   "the previous offset is kept.",
    },
    "training_diverged": {
        "title": "Training diverged",
        "message": "The training loss became non-finite.\n"
                   "Lower the learning rate or inspect the training data.",
    },
    "checkpoint_error": {
        "title": "Checkpoint could not be read",
        "message": "The checkpoint file is missing, corrupted or of an unsupported version.",
    },
    "usage_error": {
        "title": "Invalid usage",
        "message": "A required argument or input file is missing.\nRun with --help for the list of options.",
    },
    "io_error": {
        "title": "File error",
        "message": "A file could not be read or written.",
    },
    "unknown_error": {
        "title": "Unexpected error",
        "message": "An unexpected error occurred. See the log for details.",
    },
}


class PickNetError(Exception):
    """全エラーの基底クラス"""

    error_type = "unknown_error"
    exit_code = EXIT_RUNTIME

    def __init__(self, message: str = "", details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class InvalidInputError(PickNetError, ValueError):
    error_type = "invalid_input"


class InvalidConfigError(PickNetError, ValueError):
    error_type = "invalid_config"
    exit_code = EXIT_USAGE


class InvalidStateError(PickNetError, RuntimeError):
    error_type = "invalid_state"


class OutOfRangeError(PickNetError, ValueError):
    error_type = "out_of_range"


class SamplingFailureError(PickNetError, RuntimeError):
    error_type = "sampling_failure"


class SyncFailureError(PickNetError, RuntimeError):
    error_type = "sync_failure"


class TrainingDivergedError(PickNetError, ArithmeticError):
    error_type = "training_diverged"


class UsageError(PickNetError):
    error_type = "usage_error"
    exit_code = EXIT_USAGE


class CheckpointError(PickNetError):
    error_type = "checkpoint_error"


class MagicMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def show_error(error_type: str, details: Optional[str] = None) -> int:
    """エラーをログに記録し、標準エラー出力にメッセージを表示する

    Args:
        error_type: エラータイプ (ERROR_MESSAGES のキー)
        details: 追加の詳細情報

    Returns:
        対応する終了コード
    """
    error_info = ERROR_MESSAGES.get(error_type, ERROR_MESSAGES["unknown_error"])

    title = error_info["title"]
    message = error_info["message"]

    if details:
        message += f"\n\nDetails: {details}"

    logger.error(f"[{error_type}] {title}: {details or ''}")
    print(f"{title}\n{message}", file=sys.stderr)

    if error_type in ("invalid_config", "usage_error"):
        return EXIT_USAGE
    return EXIT_RUNTIME


def show_exception(exc: PickNetError) -> int:
    """例外からエラー表示を行うショートカット関数"""
    show_error(exc.error_type, str(exc))
    if exc.details:
        logger.debug(f"Error details: {exc.details}", extra={"event": exc.details})
    return exc.exit_code
