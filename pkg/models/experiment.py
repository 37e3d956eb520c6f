"""
Pydantic models for a complete experiment configuration file
"""
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from models.data import DataConfig
from models.training import TrainConfig
from models.slash import SlashConfig
from utils.error_handlers import ConfigurationError

class FrequencyConfig(BaseModel):
    """
    RoPE frequency construction

    ``pulse`` fills the cone band with Dirichlet-kernel frequencies (m defaults
    to d_b/2) and the semantic band with low frequencies at most
    semantic_scale·N^(−semantic_alpha). ``classic`` uses base^(−2ℓ/d) over the
    whole embedding width.
    """
    model_config = ConfigDict(extra="forbid")

    mode: Literal["classic", "pulse"] = "pulse"
    base: float = 10000.0
    m: Optional[int] = None
    semantic_alpha: float = 2.0
    semantic_scale: float = 1.0

    @field_validator('base')
    @classmethod
    def validate_base(cls, v):
        if not v > 1:
            raise ValueError(f'base must exceed 1, got {v}')
        return v

    @field_validator('m')
    @classmethod
    def validate_m(cls, v):
        if v is not None and v < 1:
            raise ValueError(f'm must be positive, got {v}')
        return v

    @field_validator('semantic_alpha', 'semantic_scale')
    @classmethod
    def validate_semantic(cls, v, info):
        if not v > 0:
            raise ValueError(f'{info.field_name} must be positive, got {v}')
        return v

class ExperimentConfig(BaseModel):
    """Everything a run needs; echoed verbatim into every report manifest"""
    model_config = ConfigDict(extra="forbid")

    name: str = "slash-dominance"
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    freqs: FrequencyConfig = FrequencyConfig()
    slash: SlashConfig = SlashConfig()
    output_dir: Optional[str] = None
    formats: List[Literal["csv", "json"]] = ["csv", "json"]
    ood_scale: float = 3.0
    ood_prompts: int = 1000

    @field_validator('ood_scale')
    @classmethod
    def validate_ood_scale(cls, v):
        if not v >= 1:
            raise ValueError(f'ood_scale must be at least 1, got {v}')
        return v

    @field_validator('ood_prompts')
    @classmethod
    def validate_ood_prompts(cls, v):
        if v < 1:
            raise ValueError(f'ood_prompts must be positive, got {v}')
        return v

    @model_validator(mode='after')
    def validate_pulse_width(self):
        # pulse mode fills the whole cone band with m frequencies
        if self.freqs.mode == "pulse" and self.freqs.m is not None and 2 * self.freqs.m != self.data.d_b:
            raise ValueError(f'freqs.m ({self.freqs.m}) must equal d_b/2 ({self.data.d_b // 2})')
        return self

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        """
        Load and validate a JSON experiment file

        Raises:
            FileNotFoundError: if the file does not exist
            ConfigurationError: on malformed JSON or any invalid field; the
                message names the offending field (e.g. ``train.eta1``)
        """
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}", details={"path": str(path)})
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            problems = []
            for err in e.errors():
                field = ".".join(str(part) for part in err["loc"]) or "config"
                problems.append(f"{field}: {err['msg']}")
            raise ConfigurationError(
                "Invalid experiment configuration: " + "; ".join(problems),
                details={"errors": problems}
            )
