"""
Input validation utilities for tensor names and output locations
"""
import re
from pathlib import Path
from typing import Union

from utils.logging_config import get_logger
from utils.error_handlers import InvalidArgumentError

logger = get_logger(__name__)

MAX_NAME_BYTES = 255

# Control characters and path separators are never part of a tensor name
FORBIDDEN_NAME_PATTERN = re.compile(r'[\x00-\x1f\x7f/\\]')

def validate_tensor_name(name: str) -> str:
    """
    Validate a tensor name before it is written to or read from a dump

    Args:
        name: Tensor name

    Returns:
        The unchanged name

    Raises:
        InvalidArgumentError: if the name is empty, too long, or contains
            path separators, '..' or control characters
    """
    if not isinstance(name, str) or not name:
        raise InvalidArgumentError("Tensor name cannot be empty", details={"name": name})

    encoded = name.encode("utf-8")
    if len(encoded) > MAX_NAME_BYTES:
        raise InvalidArgumentError(
            f"Tensor name exceeds {MAX_NAME_BYTES} bytes",
            details={"name": name[:32], "bytes": len(encoded)}
        )

    if FORBIDDEN_NAME_PATTERN.search(name) or ".." in name:
        raise InvalidArgumentError(
            f"Tensor name '{name}' contains path separators or control characters",
            details={"name": name}
        )

    return name

def validate_output_dir(path: Union[str, Path]) -> Path:
    """
    Ensure an output directory exists and is a directory

    Args:
        path: Directory path

    Returns:
        Path object for the directory
    """
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InvalidArgumentError(f"Output path '{out}' exists and is not a directory", details={"path": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    logger.debug(f"Output directory ready: {out}")
    return out
