"""Configuration models, the flat ``key = value`` config-file loader and
environment settings."""

import logging
from enum import Enum
from pathlib import Path
from typing import Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.errors import InvalidConfigError

logger = logging.getLogger(__name__)


class TrainingMode(str, Enum):
    """The three parameter-partition regimes."""

    PRETRAIN = "pretrain"
    FINETUNE_CONVENTIONAL = "finetune_conventional"
    FINETUNE_ROBUST = "finetune_robust"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class StftConfig(_Section):
    """Short-time Fourier transform framing."""

    window_len_samples: int = Field(default=256, gt=1, description="Analysis window length in samples")
    hop_samples: int = Field(default=128, gt=0, description="Hop between frames in samples")
    window: Literal["hann"] = Field(default="hann", description="Analysis window kind (periodic Hann)")

    @model_validator(mode="after")
    def _check_framing(self) -> "StftConfig":
        if self.hop_samples > self.window_len_samples:
            raise ValueError("hop_samples must not exceed window_len_samples")
        if self.window_len_samples % 2:
            raise ValueError("window_len_samples must be even")
        return self

    @property
    def num_freq_bins(self) -> int:
        return self.window_len_samples // 2 + 1


class TaskConfig(_Section):
    """Stochastic speaker-set task parameters."""

    tau: int = Field(default=40000, gt=0, description="Example length in samples")
    g_min: int = Field(default=1, ge=1, description="Smallest number of target speakers")
    g_max: int = Field(default=3, ge=1, description="Largest number of target speakers")
    h_min: int = Field(default=1, ge=1, description="Smallest number of interfering speakers")
    h_max: int = Field(default=3, ge=1, description="Largest number of interfering speakers")
    snr_min_db: float = Field(default=-5.0, description="Lower bound of the mixing SNR")
    snr_max_db: float = Field(default=5.0, description="Upper bound of the mixing SNR")
    conversation_mode: bool = Field(default=False, description="Single-active-speaker target and interferer")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Task stream seed")

    @model_validator(mode="after")
    def _check_ranges(self) -> "TaskConfig":
        if self.g_min > self.g_max:
            raise ValueError("g_min must not exceed g_max")
        if self.h_min > self.h_max:
            raise ValueError("h_min must not exceed h_max")
        if self.snr_min_db > self.snr_max_db:
            raise ValueError("snr_min_db must not exceed snr_max_db")
        return self


class ModelConfig(_Section):
    """BLSTM-FC architecture dimensions."""

    num_freq_bins: int = Field(default=129, gt=0, description="F, frequency bins per frame")
    embedding_dim: int = Field(default=32, gt=0, description="K, speaker embedding size")
    num_blstm_layers: int = Field(default=2, ge=1, description="Stacked bidirectional LSTM layers")
    num_fc_layers: int = Field(default=2, ge=1, description="Fully connected layers after the BLSTM stack")
    hidden_units: int = Field(default=64, gt=0, description="Units per LSTM direction and per hidden FC layer")
    compression_exponent: float = Field(default=0.3, gt=0.0, le=1.0, description="Power-law exponent p")
    init_seed: int = Field(default=0, ge=0, lt=2**64, description="Parameter initialisation seed")

    @classmethod
    def large(cls) -> "ModelConfig":
        """5 BLSTM layers, 3 FC layers, 512 units, K=512."""
        return cls(embedding_dim=512, num_blstm_layers=5, num_fc_layers=3, hidden_units=512)


class TrainConfig(_Section):
    """Optimiser, schedule and loop settings."""

    base_lr: float = Field(default=3e-4, gt=0.0, description="Initial learning rate")
    decay_rate: float = Field(default=0.95, gt=0.0, le=1.0, description="Staircase decay factor")
    decay_every_steps: int = Field(default=3000, gt=0, description="Steps between decays")
    rms_decay: float = Field(default=0.9, ge=0.0, lt=1.0, description="RMSProp rho")
    rms_epsilon: float = Field(default=1e-8, gt=0.0, description="RMSProp epsilon")
    batch_size: int = Field(default=8, gt=0, description="Examples per step; losses are summed")
    max_steps: int = Field(default=5000, ge=0, description="Total optimisation steps")
    mode: TrainingMode = Field(default=TrainingMode.PRETRAIN, description="Parameter partition regime")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Training stream seed")
    eval_every: int = Field(default=250, gt=0, description="Steps between probe/eval passes")
    eval_examples: int = Field(default=16, ge=0, description="Examples per periodic SI-SNR eval")
    probe_batch_size: int = Field(default=8, gt=0, description="Examples in the fixed probe batch")
    patience: int = Field(default=5, gt=0, description="Evaluations without probe improvement before stopping")
    checkpoint_every: int = Field(default=500, gt=0, description="Steps between checkpoints")
    clip_norm: Optional[float] = Field(default=None, gt=0.0, description="Global gradient max-norm; off when unset")
    new_embedding_seed: int = Field(default=1, ge=0, lt=2**64, description="Seed for new speaker rows")


class DataConfig(_Section):
    """Corpus split settings."""

    head_seconds: float = Field(default=100.0, gt=0.0, description="Per-speaker head split duration")


class RunConfig(_Section):
    """Everything a training or evaluation command needs."""

    stft: StftConfig = Field(default_factory=StftConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @model_validator(mode="after")
    def _check_frequency_bins(self) -> "RunConfig":
        if self.model.num_freq_bins != self.stft.num_freq_bins:
            raise ValueError(
                f"model.num_freq_bins ({self.model.num_freq_bins}) must equal "
                f"stft window_len_samples/2+1 ({self.stft.num_freq_bins})"
            )
        return self


class AGNSettings(BaseSettings):
    """Process-level settings read from ``AGN_*`` environment variables or ``.env``."""

    model_config = SettingsConfigDict(env_prefix="AGN_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    num_workers: int = Field(default=1, ge=1)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Dict[str, str]]:
    """Parse flat ``section.key = value`` lines into a nested dict of strings.

    Raises:
        InvalidConfigError: On malformed lines, duplicate keys or unknown sections
    """
    sections = set(RunConfig.model_fields)
    nested: Dict[str, Dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, dot, name = key.partition(".")
        if not dot or not name:
            raise InvalidConfigError(f"{source}:{lineno}: key {key!r} must be 'section.name'")
        if section not in sections:
            raise InvalidConfigError(
                f"{source}:{lineno}: unknown section {section!r}; known: {sorted(sections)}"
            )
        if name in nested.setdefault(section, {}):
            raise InvalidConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        nested[section][name] = value
    return nested


def _none_if_blank(values: Dict[str, str]) -> Dict[str, Optional[str]]:
    return {k: (None if v.lower() in ("", "none") else v) for k, v in values.items()}


def config_from_text(text: str, source: str = "<config>") -> RunConfig:
    """Build a validated RunConfig from config-file text."""
    nested = {s: _none_if_blank(v) for s, v in parse_config_text(text, source).items()}
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise InvalidConfigError(f"{source}: invalid configuration:\n{e}") from e


def load_config(path: str | Path) -> RunConfig:
    """Load and validate a flat key-value config file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidConfigError(f"Cannot read config file {path}: {e}") from e
    config = config_from_text(text, str(path))
    logger.info(f"Loaded configuration from {path}")
    return config


def dump_config(config: RunConfig) -> str:
    """Render a RunConfig back to flat ``section.key = value`` text."""
    lines = []
    for section, model in config:
        for name, value in model.model_dump(mode="json").items():
            lines.append(f"{section}.{name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
