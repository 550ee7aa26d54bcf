import json
import logging
import sys
from pathlib import Path

_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# LogRecord の標準属性（JSON 出力時に extra と区別するため）
_RESERVED = set(vars(logging.makeLogRecord({})).keys()) | {"message", "asctime"}


class JsonLinesFormatter(logging.Formatter):
    """1 レコード = 1 行の JSON として出力するフォーマッタ"""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=str)


def setup_logger(name: str = "picknet"):
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG)

    if not logger.handlers:
        # Console handler
        ch = logging.StreamHandler(sys.stdout)
        ch.setLevel(logging.INFO)
        ch.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(ch)

    return logger


def attach_jsonl_log(path: str, name: str = "picknet") -> logging.Handler:
    """--log で指定されたパスに JSON Lines のファイルハンドラを追加する"""
    target = logging.getLogger(name)
    log_path = Path(path)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    fh = logging.FileHandler(log_path, encoding="utf-8")
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(JsonLinesFormatter())
    target.addHandler(fh)
    return fh


def detach_handler(handler: logging.Handler, name: str = "picknet"):
    logging.getLogger(name).removeHandler(handler)
    handler.close()


logger = setup_logger()
