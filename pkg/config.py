"""
Configuration management for the slash-dominance laboratory
"""
import os
import logging
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

TOOL_NAME = "slashlab"
TOOL_VERSION = "1.0.0"

class ConfigurationError(Exception):
    """
    Invalid environment settings

    Carries the message, error_code and details of the slashlab error types
    so command failures report it the same way (exit code 2).
    """

    def __init__(self, message: str, error_code: Optional[str] = None, details: Optional[dict] = None):
        self.message = message
        self.error_code = error_code or "SettingsError"
        self.details = details or {}
        super().__init__(message)

class Settings:
    """Process-wide settings read from the environment, with validation"""

    def __init__(self, validate: bool = True):
        if validate:
            self.validate()

    # Execution
    @property
    def THREADS(self) -> int:
        try:
            return int(os.getenv("SLASHLAB_THREADS", "1"))
        except ValueError:
            logger.warning("Invalid SLASHLAB_THREADS value, using default 1")
            return 1

    @property
    def OUTPUT_DIR(self) -> str:
        return os.getenv("SLASHLAB_OUTPUT_DIR", "runs")

    @property
    def SEED(self) -> int:
        try:
            return int(os.getenv("SLASHLAB_SEED", "0"))
        except ValueError:
            logger.warning("Invalid SLASHLAB_SEED value, using default 0")
            return 0

    # Report formatting
    @property
    def FLOAT_DIGITS(self) -> int:
        try:
            return int(os.getenv("SLASHLAB_FLOAT_DIGITS", "17"))
        except ValueError:
            logger.warning("Invalid SLASHLAB_FLOAT_DIGITS value, using default 17")
            return 17

    # Logging
    @property
    def LOG_LEVEL(self) -> str:
        level = os.getenv("LOG_LEVEL", "INFO").upper()
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if level not in valid_levels:
            logger.warning(f"Invalid LOG_LEVEL '{level}', using default INFO")
            return "INFO"
        return level

    @property
    def LOG_FILE(self) -> Optional[str]:
        return os.getenv("LOG_FILE")

    @property
    def ENABLE_JSON_LOGGING(self) -> bool:
        return os.getenv("ENABLE_JSON_LOGGING", "False").lower() == "true"

    def validate(self):
        errors = []

        if self.THREADS < 1:
            errors.append(f"SLASHLAB_THREADS must be at least 1, got {self.THREADS}")

        if not (0 <= self.SEED < 2 ** 64):
            errors.append(f"SLASHLAB_SEED must fit in an unsigned 64-bit integer, got {self.SEED}")

        if not (1 <= self.FLOAT_DIGITS <= 17):
            errors.append(f"SLASHLAB_FLOAT_DIGITS must be between 1 and 17, got {self.FLOAT_DIGITS}")

        if not self.OUTPUT_DIR:
            errors.append("SLASHLAB_OUTPUT_DIR cannot be empty")

        if errors:
            error_msg = "Configuration validation failed:\n" + "\n".join(f"- {error}" for error in errors)
            raise ConfigurationError(error_msg, details={"errors": errors})

    def get_config_summary(self) -> dict:
        """Settings as a plain dict, logged when a command starts"""
        return {
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "THREADS": self.THREADS,
            "OUTPUT_DIR": self.OUTPUT_DIR,
            "SEED": self.SEED,
            "FLOAT_DIGITS": self.FLOAT_DIGITS,
            "LOG_LEVEL": self.LOG_LEVEL,
            "LOG_FILE": self.LOG_FILE,
            "ENABLE_JSON_LOGGING": self.ENABLE_JSON_LOGGING,
        }

# Global settings instance; main validates it before a command runs
settings = Settings(validate=False)
