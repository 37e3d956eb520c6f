"""
Centralized error types, standardized error reports and the CLI exit-code contract
"""
import json
import sys
from typing import Dict, Any, Optional

from config import ConfigurationError as SettingsError
from utils.logging_config import get_logger, log_error

logger = get_logger(__name__)

# Exit-code contract shared by every command
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3
EXIT_DIVERGED = 4

class SlashLabError(Exception):
    """Base exception class for slashlab"""

    def __init__(self, message: str, error_code: str = None, details: Dict[str, Any] = None):
        self.message = message
        self.error_code = error_code or self.__class__.__name__
        self.details = details or {}
        super().__init__(self.message)

class UsageError(SlashLabError):
    """Bad command-line usage"""
    pass

class InvalidArgumentError(SlashLabError, ValueError):
    """Argument outside an operation's domain (odd dimension, bad lag, size mismatch)"""
    pass

class DegenerateSpectrumError(SlashLabError, ValueError):
    """Every singular value (or alignment score) is zero"""
    pass

class DegenerateMeanError(SlashLabError, ValueError):
    """Projection mean too close to zero for a relative variation"""
    pass

class AliasingError(SlashLabError, ValueError):
    """Pulse frequencies repeat inside the requested horizon"""
    pass

class DivergedError(SlashLabError):
    """Non-finite loss or gradient during training"""
    pass

class DumpFormatError(SlashLabError):
    """Bad magic, version or checksum in a tensor dump"""
    pass

class DumpCorruptError(SlashLabError):
    """Tensor payload inconsistent with its declared shape"""
    pass

class MissingTensorError(SlashLabError):
    """Dump lacks the tensors an analysis needs"""
    pass

class ConfigurationError(SlashLabError):
    """Exception for experiment configuration issues"""
    pass

class AcceptanceError(SlashLabError):
    """A run finished but missed an acceptance threshold"""
    pass

def exit_code_for(error: Exception) -> int:
    """
    Map an exception to the CLI exit code

    Args:
        error: Exception raised by a command

    Returns:
        Exit code per the command contract
    """
    exit_mapping = {
        UsageError: EXIT_USAGE,
        InvalidArgumentError: EXIT_CONFIG,
        DegenerateSpectrumError: EXIT_CONFIG,
        DegenerateMeanError: EXIT_CONFIG,
        AliasingError: EXIT_CONFIG,
        DumpFormatError: EXIT_CONFIG,
        DumpCorruptError: EXIT_CONFIG,
        MissingTensorError: EXIT_CONFIG,
        ConfigurationError: EXIT_CONFIG,
        SettingsError: EXIT_CONFIG,
        AcceptanceError: EXIT_ACCEPTANCE,
        DivergedError: EXIT_DIVERGED,
    }
    if isinstance(error, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return EXIT_CONFIG
    return exit_mapping.get(type(error), EXIT_CONFIG if isinstance(error, SlashLabError) else EXIT_USAGE)

def create_error_report(
    error_code: str,
    message: str,
    exit_code: int,
    details: Optional[Dict[str, Any]] = None,
    command: Optional[str] = None
) -> Dict[str, Any]:
    """
    Create a standardized error report

    Args:
        error_code: Unique error code
        message: Human-readable error message
        exit_code: Process exit code
        details: Additional error details
        command: Command that failed

    Returns:
        Standardized error report dictionary
    """
    error_report = {
        "success": False,
        "error": {
            "code": error_code,
            "message": message,
            "exit_code": exit_code
        }
    }

    if details:
        error_report["error"]["details"] = details

    if command:
        error_report["error"]["command"] = command

    return error_report

def handle_command_error(error: Exception, command: str = "command") -> int:
    """
    Log a command failure, print its error report to stderr and return the exit code

    Args:
        error: Exception raised by the command
        command: Command name

    Returns:
        Exit code
    """
    code = exit_code_for(error)
    log_error(logger, error, operation=command)

    if isinstance(error, (SlashLabError, SettingsError)):
        report = create_error_report(error.error_code, error.message, code, error.details, command)
    else:
        report = create_error_report(type(error).__name__, str(error), code, command=command)

    print(json.dumps(report, default=str), file=sys.stderr)
    return code

def safe_execute(func, *args, command: str = None, **kwargs) -> int:
    """
    Run a command handler and convert failures to exit codes

    Args:
        func: Handler returning an exit code
        *args: Handler arguments
        command: Command name for logging
        **kwargs: Handler keyword arguments

    Returns:
        The handler's exit code, or the mapped code of the exception it raised
    """
    try:
        return func(*args, **kwargs)
    except Exception as e:
        return handle_command_error(e, command or getattr(func, "__name__", "command"))
