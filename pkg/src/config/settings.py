"""Configuration settings for the inference engine"""
import os
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..utils.exceptions import ConfigError

load_dotenv()


def _env_bool(name: str, default: bool = False) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


class Settings:
    """Process-level settings read from the environment"""

    def __init__(self):
        # Parallelism; overrides --threads when set
        threads = os.getenv('SVAE_THREADS')
        self.THREADS: Optional[int] = int(threads) if threads and threads.strip().isdigit() else None
        self._threads_raw = threads

        # Logging
        self.LOG_LEVEL = os.getenv('SVAE_LOG_LEVEL', 'INFO')
        self.LOG_FILE = os.getenv('SVAE_LOG_FILE')
        self.LOG_JSON = _env_bool('SVAE_LOG_JSON')

        # Default directory for run artifacts
        self.OUTPUT_DIR = os.getenv('SVAE_OUTPUT_DIR', '.')

    def resolve_threads(self, requested: int) -> int:
        """Worker count for a run; the environment wins over the flag"""
        return self.THREADS if self.THREADS is not None else requested

    def validate(self):
        """Validate settings"""
        if self._threads_raw is not None and (self.THREADS is None or self.THREADS < 1):
            raise ConfigError(f"SVAE_THREADS must be a positive integer, got {self._threads_raw!r}")
        if self.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"Unknown SVAE_LOG_LEVEL {self.LOG_LEVEL!r}")


# Create settings instance
settings = Settings()


# Run configuration models

class ModelConfig(BaseModel):
    """Architecture and prior of an SVAE"""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["lds", "slds"] = "slds"
    obs_dim: int = Field(100, gt=0)
    latent_dim: int = Field(2, gt=0)
    states: int = Field(4, gt=0)
    hidden: List[int] = Field(default_factory=lambda: [64])
    activation: Literal["gelu", "tanh", "identity"] = "gelu"
    layer_norm: bool = True
    likelihood: Literal["gaussian", "gamma"] = "gaussian"
    n_mc: int = Field(1, gt=0)
    bijector: Literal["family", "identity"] = "family"
    prior_scale: float = Field(1.0, gt=0)
    dirichlet_alpha: float = Field(1.0, gt=0)
    sticky: float = Field(4.0, ge=0)

    @field_validator("hidden")
    @classmethod
    def _positive_hidden(cls, v: List[int]) -> List[int]:
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be positive")
        return v

    @model_validator(mode="after")
    def _lds_has_one_state(self) -> "ModelConfig":
        if self.kind == "lds" and self.states != 1:
            if "states" in self.model_fields_set:
                raise ValueError("an lds model has exactly one state")
            self.states = 1
        return self


class TrainConfig(BaseModel):
    """Three-stage training schedule and optimizer settings"""
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(200, gt=0)
    batch_size: int = Field(4, gt=0)
    adam_lr: float = Field(1e-3, ge=0)
    nat_lr: float = Field(0.5, ge=0)
    stage_fractions: Tuple[float, float, float] = (0.1, 0.2, 0.7)
    grad_mode: Literal["unrolled", "implicit", "capped", "thresholded", "no-solve"] = "capped"
    richardson_iters: int = Field(50, ge=0)
    residual_tol: float = Field(1e-6, gt=0)
    bp: Literal["sequential", "parallel"] = "sequential"
    max_sweeps: int = Field(100, gt=0)
    sweep_tol: float = Field(1e-8, gt=0)
    biased_natgrad: bool = False
    global_optimizer: Literal["natural", "adam"] = "natural"
    global_adam_lr: float = Field(1e-2, ge=0)
    deterministic: bool = True
    log_every: int = Field(10, gt=0)

    @field_validator("stage_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("stage fractions must be non-negative and sum to 1")
        return v

    def stage_steps(self) -> Tuple[int, int, int]:
        """Steps per stage; rounding remainders go to the last stage"""
        first = int(round(self.steps * self.stage_fractions[0]))
        second = int(round(self.steps * self.stage_fractions[1]))
        first = min(first, self.steps)
        second = min(second, self.steps - first)
        return first, second, self.steps - first - second


class SynthConfig(BaseModel):
    """Laplace-bump sequence generator"""
    model_config = ConfigDict(extra="forbid")

    grid_size: int = Field(100, gt=1)
    T: int = Field(250, gt=0)
    n_sequences: int = Field(20, gt=0)
    regimes: List[Literal["mean+", "mean-", "var+", "var-"]] = Field(
        default_factory=lambda: ["mean+", "mean-", "var+", "var-"])
    switch_period: Optional[int] = Field(None, gt=0)
    drift_step: float = Field(0.01, ge=0)
    scale_step: float = Field(0.02, ge=0)
    noise: float = Field(0.01, ge=0)
    loc_init: float = Field(0.5, ge=0.2, le=0.8)
    scale_init: float = Field(0.08, gt=0)
    scale_min: float = Field(0.03, gt=0)
    scale_max: float = Field(0.2, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _scale_range(self) -> "SynthConfig":
        if not self.scale_min <= self.scale_init <= self.scale_max:
            raise ValueError("scale_init must lie in [scale_min, scale_max]")
        if not self.regimes:
            raise ValueError("at least one regime is required")
        return self

    @property
    def period(self) -> int:
        return self.switch_period or max(1, self.T // 5)


def parse_mask(text: str) -> Tuple[float, float]:
    """'a:b' fractional range with 0 <= a < b <= 1"""
    try:
        a_text, b_text = text.split(":")
        a, b = float(a_text), float(b_text)
    except ValueError:
        raise ValueError(f"mask must look like a:b, got {text!r}") from None
    if not 0.0 <= a < b <= 1.0:
        raise ValueError(f"mask range must satisfy 0 <= a < b <= 1, got {text!r}")
    return a, b


class RunConfig(BaseModel):
    """Validated configuration of one CLI invocation"""
    model_config = ConfigDict(extra="forbid")

    command: Literal["generate", "fit", "infer", "impute", "bench", "check"]
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    threads: int = Field(1, gt=0)
    seed: int = 0
    data: Optional[str] = None
    output: Optional[str] = None
    checkpoint: Optional[str] = None
    metrics: Optional[str] = None
    mask: Optional[str] = None

    @field_validator("mask")
    @classmethod
    def _valid_mask(cls, v: Optional[str]) -> Optional[str]:
        if v is not None:
            parse_mask(v)
        return v

    def mask_range(self) -> Optional[Tuple[float, float]]:
        return parse_mask(self.mask) if self.mask else None
