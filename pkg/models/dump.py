"""
Pydantic model for the JSON sidecar manifest of a tensor dump
"""
from typing import Optional

from pydantic import BaseModel, ConfigDict, field_validator

class DumpManifest(BaseModel):
    """Provenance of a dump; ``rope_applied`` tells analysis whether Q/K are already rotated"""
    model_config = ConfigDict(extra="forbid")

    model: str
    layer: int
    head: int
    context_len: int
    rope_applied: bool
    logit_scale_hint: Optional[float] = None
    freq_base: Optional[float] = None

    @field_validator('layer', 'head')
    @classmethod
    def validate_index(cls, v, info):
        if v < 0:
            raise ValueError(f'{info.field_name} must be non-negative, got {v}')
        return v

    @field_validator('context_len')
    @classmethod
    def validate_context_len(cls, v):
        if v < 1:
            raise ValueError(f'context_len must be positive, got {v}')
        return v
