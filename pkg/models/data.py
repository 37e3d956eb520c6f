"""
Pydantic model for the in-context regression data configuration
"""
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

class DataConfig(BaseModel):
    """
    Features, prompt length and embedding widths of the regression data model

    Features are the first K standard basis vectors of the d_X-space; the
    cone axis defaults to the first basis vector of the d_b-space.
    """
    model_config = ConfigDict(extra="forbid")

    K: int = 4
    N_in: int = 64
    d_X: int = 4
    d_b: int = 260
    feature_probs: Optional[List[float]] = None
    cone_axis: Optional[List[float]] = None

    @field_validator('K', 'N_in', 'd_X', 'd_b')
    @classmethod
    def validate_positive(cls, v, info):
        if v < 1:
            raise ValueError(f'{info.field_name} must be positive, got {v}')
        return v

    @field_validator('d_X', 'd_b')
    @classmethod
    def validate_even(cls, v, info):
        # layer-2 rotations act on d_X + 2 coordinates in pairs
        if v % 2:
            raise ValueError(f'{info.field_name} must be even, got {v}')
        return v

    @field_validator('feature_probs')
    @classmethod
    def validate_feature_probs(cls, v):
        if v is None:
            return v
        probs = np.asarray(v, dtype=np.float64)
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError('feature_probs must be finite and non-negative')
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f'feature_probs must sum to 1, got {probs.sum()}')
        return v

    @field_validator('cone_axis')
    @classmethod
    def validate_cone_axis(cls, v):
        if v is None:
            return v
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-12:
            raise ValueError('cone_axis must have unit norm')
        return v

    @model_validator(mode='after')
    def validate_dimensions(self):
        if self.d_X < self.K:
            raise ValueError(f'd_X ({self.d_X}) must be at least K ({self.K})')
        if self.feature_probs is not None and len(self.feature_probs) != self.K:
            raise ValueError(f'feature_probs has {len(self.feature_probs)} entries, expected K={self.K}')
        if self.cone_axis is not None and len(self.cone_axis) != self.d_b:
            raise ValueError(f'cone_axis has {len(self.cone_axis)} entries, expected d_b={self.d_b}')
        return self

    @property
    def N(self) -> int:
        return 2 * self.N_in + 1

    @property
    def d(self) -> int:
        return self.d_b + self.d_X + 2

    @property
    def probs(self) -> np.ndarray:
        if self.feature_probs is None:
            return np.full(self.K, 1.0 / self.K)
        return np.asarray(self.feature_probs, dtype=np.float64)

    @property
    def features(self) -> np.ndarray:
        """K × d_X matrix whose rows are v_1..v_K"""
        return np.eye(self.K, self.d_X)

    @property
    def cone(self) -> np.ndarray:
        if self.cone_axis is None:
            return np.eye(1, self.d_b).reshape(-1)
        return np.asarray(self.cone_axis, dtype=np.float64)

    @property
    def cone_key(self) -> np.ndarray:
        """c̃ = (1, 0, 1, 0, ...) in the d_b-space"""
        c_tilde = np.zeros(self.d_b)
        c_tilde[0::2] = 1.0
        return c_tilde
