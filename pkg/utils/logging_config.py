"""
Logging for slashlab runs

Console records go to stderr (stdout is reserved for the JSON that
check-freq and gradcheck print). Records may carry run context through
``extra``: operation, command, experiment, stage, step and a ``metrics``
mapping. The console formatter renders that context inline; the JSON
formatter writes it as top-level fields.
"""
import json
import logging
import logging.handlers
import sys
from datetime import datetime
from numbers import Real
from pathlib import Path
from typing import Any, Mapping, Optional

from config import settings

CONTEXT_FIELDS = ("operation", "command", "experiment", "stage", "step", "error_type")
LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

def format_metrics(metrics: Mapping[str, Any]) -> str:
    """key=value pairs; reals with 6 significant digits"""
    parts = []
    for key, value in metrics.items():
        if isinstance(value, Real) and not isinstance(value, bool):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)

class JSONFormatter(logging.Formatter):
    """One JSON object per record, with run context as top-level fields"""

    def format(self, record):
        entry = {
            "timestamp": datetime.fromtimestamp(record.created).astimezone().isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        for field in CONTEXT_FIELDS:
            if hasattr(record, field):
                entry[field] = getattr(record, field)
        if hasattr(record, "duration"):
            entry["duration_ms"] = record.duration
        if hasattr(record, "metrics"):
            entry["metrics"] = record.metrics
        if hasattr(record, "details"):
            entry["details"] = record.details
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        return json.dumps(entry, default=str)

class ColoredFormatter(logging.Formatter):
    """Colored console lines; training records show their stage and step"""

    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
    }
    RESET = '\033[0m'

    def __init__(self, use_color: bool = True):
        super().__init__()
        self.use_color = use_color

    def format(self, record):
        timestamp = datetime.fromtimestamp(record.created).strftime('%H:%M:%S')
        where = ""
        if hasattr(record, "stage") and hasattr(record, "step"):
            where = f" [stage {record.stage} step {record.step}]"
        message = f"[{timestamp}] {record.levelname:8} {record.name:24}{where} | {record.getMessage()}"
        if hasattr(record, "metrics") and record.metrics:
            message += f" | {format_metrics(record.metrics)}"
        if self.use_color:
            message = f"{self.COLORS.get(record.levelname, '')}{message}{self.RESET}"
        if record.exc_info and record.levelno >= logging.ERROR:
            message += f"\n{self.formatException(record.exc_info)}"
        return message

def setup_logging(
    log_level: str = "INFO",
    log_file: Optional[str] = None,
    enable_json_logging: bool = False,
    max_file_size: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5
) -> None:
    """
    Install the console handler and, with ``log_file``, a rotating file handler

    Args:
        log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL
        log_file: Path of the log file (optional)
        enable_json_logging: JSON records in the log file
        max_file_size: Rotation size in bytes
        backup_count: Rotated files kept
    """
    level = log_level.upper() if log_level.upper() in LEVELS else "INFO"
    numeric_level = getattr(logging, level)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(ColoredFormatter(use_color=sys.stderr.isatty()))
    root_logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=max_file_size,
            backupCount=backup_count,
            encoding='utf-8'
        )
        file_handler.setLevel(numeric_level)
        if enable_json_logging:
            file_handler.setFormatter(JSONFormatter())
        else:
            file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        root_logger.addHandler(file_handler)

    logging.getLogger(__name__).debug(
        f"Logging configured - Level: {level}, File: {log_file or 'None'}, JSON: {enable_json_logging}"
    )

def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)

def log_operation(logger: logging.Logger, operation: str, duration_ms: Optional[float] = None, **kwargs):
    """
    Log a finished operation with structured context

    Args:
        logger: Logger instance
        operation: Operation name (train, snapshot, gradcheck, ...)
        duration_ms: Wall time in milliseconds
        **kwargs: Context fields such as stage, step, experiment or metrics
    """
    extra = {"operation": operation}
    if duration_ms is not None:
        extra["duration"] = duration_ms
    extra.update(kwargs)

    message = f"Operation: {operation}"
    if duration_ms is not None:
        message += f" (took {duration_ms:.2f}ms)"

    logger.info(message, extra=extra)

def log_error(logger: logging.Logger, error: Exception, operation: str = None, **kwargs):
    """
    Log a failure; details attached to slashlab errors travel with the record

    The traceback is kept for unexpected exceptions only, domain errors are
    reported by message and details.
    """
    extra = {"error_type": type(error).__name__}
    if operation:
        extra["operation"] = operation
    details = getattr(error, "details", None)
    if details:
        extra["details"] = details
    extra.update(kwargs)

    message = f"Operation '{operation}' failed: {error}" if operation else f"Error: {error}"
    expected = hasattr(error, "error_code")
    logger.error(message, exc_info=not expected, extra=extra)

def init_logging(log_level: Optional[str] = None):
    """Logging from settings; ``log_level`` overrides LOG_LEVEL"""
    try:
        setup_logging(
            log_level=log_level or settings.LOG_LEVEL,
            log_file=settings.LOG_FILE,
            enable_json_logging=settings.ENABLE_JSON_LOGGING
        )
    except OSError as e:
        # unwritable log file: keep the console
        logging.basicConfig(level=logging.INFO, stream=sys.stderr)
        logging.getLogger(__name__).error(f"Failed to initialize logging configuration: {e}")
