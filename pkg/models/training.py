"""
Pydantic model for two-stage gradient descent settings
"""
import math
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

class TrainConfig(BaseModel):
    """Learning rates, step caps, batch size and stopping targets"""
    model_config = ConfigDict(extra="forbid")

    eta1: float = 1.0
    eta2: float = 1.0
    tau1: int = 2000
    tau2: int = 2000
    batch_size: int = 256
    seed: int = 0
    snapshot_every: int = 50
    eps1: Optional[float] = None
    eps2: Optional[float] = None
    tracking_prompts: int = 64
    chunk_size: int = 32
    stage2_early_stop: bool = False

    @field_validator('eta1', 'eta2')
    @classmethod
    def validate_learning_rate(cls, v, info):
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f'{info.field_name} must be finite and non-negative, got {v}')
        return v

    @field_validator('tau1', 'tau2')
    @classmethod
    def validate_step_cap(cls, v, info):
        if v < 0:
            raise ValueError(f'{info.field_name} must be non-negative, got {v}')
        return v

    @field_validator('batch_size', 'snapshot_every', 'tracking_prompts', 'chunk_size')
    @classmethod
    def validate_positive(cls, v, info):
        if v < 1:
            raise ValueError(f'{info.field_name} must be positive, got {v}')
        return v

    @field_validator('seed')
    @classmethod
    def validate_seed(cls, v):
        if not (0 <= v < 2 ** 64):
            raise ValueError(f'seed must be an unsigned 64-bit integer, got {v}')
        return v

    @field_validator('eps1', 'eps2')
    @classmethod
    def validate_target(cls, v, info):
        if v is not None and not (0 < v < 1):
            raise ValueError(f'{info.field_name} must lie in (0, 1), got {v}')
        return v

    @model_validator(mode='after')
    def validate_target_order(self):
        if self.eps1 is not None and self.eps2 is not None and self.eps1 > self.eps2:
            raise ValueError(f'eps1 ({self.eps1}) must not exceed eps2 ({self.eps2})')
        return self

    def targets(self, N: int) -> Tuple[float, float]:
        """(eps1, eps2), defaulting to max(0.1, N^-1/2) and max(0.3, N^-1/4)"""
        eps1 = self.eps1 if self.eps1 is not None else max(0.1, N ** -0.5)
        eps2 = self.eps2 if self.eps2 is not None else max(0.3, N ** -0.25)
        return eps1, max(eps1, eps2)
