"""
Pydantic model for slash-dominance scoring settings
"""
import math
from typing import List

from pydantic import BaseModel, ConfigDict, field_validator

class SlashConfig(BaseModel):
    """Lags to score, detection threshold, excluded prefix and logit scale"""
    model_config = ConfigDict(extra="forbid")

    lags: List[int] = [0, 1, 2, 3, 4]
    kappa: float = 0.1
    excluded_prefix: int = 0
    logit_scale: float = 1.0

    @field_validator('lags')
    @classmethod
    def validate_lags(cls, v):
        if not v:
            raise ValueError('lags cannot be empty')
        if any(lag < 0 for lag in v):
            raise ValueError('lags must be non-negative')
        if any(a >= b for a, b in zip(v, v[1:])):
            raise ValueError('lags must be strictly ascending')
        return v

    @field_validator('kappa')
    @classmethod
    def validate_kappa(cls, v):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f'kappa must lie in [0, 1], got {v}')
        return v

    @field_validator('excluded_prefix')
    @classmethod
    def validate_excluded_prefix(cls, v):
        if v < 0:
            raise ValueError(f'excluded_prefix must be non-negative, got {v}')
        return v

    @field_validator('logit_scale')
    @classmethod
    def validate_logit_scale(cls, v):
        if not math.isfinite(v):
            raise ValueError('logit_scale must be finite')
        return v

    @classmethod
    def ingested(cls, head_dim: int, **overrides) -> "SlashConfig":
        """Defaults for dumps of real models: skip sink positions, scale by 1/sqrt(d_h)"""
        values = {"excluded_prefix": 4, "logit_scale": 1.0 / math.sqrt(head_dim)}
        values.update(overrides)
        return cls(**values)

    @classmethod
    def long_range(cls, **overrides) -> "SlashConfig":
        """Offsets 500..5000 with the small threshold used for long contexts"""
        values = {"lags": list(range(500, 5001)), "kappa": 1e-3, "excluded_prefix": 4}
        values.update(overrides)
        return cls(**values)
