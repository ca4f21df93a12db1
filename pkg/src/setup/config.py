"""
Two layers of configuration live here:

1. GeneralConfig: machine-level settings (where runs go, how many threads to use, how
   chatty the logs should be). These come from the environment or a .env file.

2. The experiment schema: one JSON document describing a whole simulated federation,
   from the data and the model through to the protection scheme and the attacks that
   are run against it. Unknown keys are rejected so that a typo never silently falls
   back to a default.
"""
import json
import math
import hashlib
from pathlib import Path
from typing import Any, Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.setup.paths import PARENT_DIR, DEFAULT_RUN_DIR
from src.setup.exceptions import ConfigError


_ = load_dotenv(PARENT_DIR / ".env")


class GeneralConfig(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=f"{PARENT_DIR}/.env", env_file_encoding="utf-8", env_prefix="FEDTRACKER_", extra="ignore"
    )

    output_dir: Path = DEFAULT_RUN_DIR
    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"


config = GeneralConfig()


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class FlConfig(_StrictModel):
    clients: int = Field(default=10, ge=1)
    rounds: int = Field(default=30, ge=0)
    participation_fraction: float = Field(default=0.4, gt=0, le=1)
    local_epochs: int = Field(default=2, ge=0)
    client_lr: float = Field(default=0.01, gt=0)
    batch_size: int = Field(default=32, ge=2)
    aggregation: Literal["updates", "models"] = "updates"

    @property
    def sampled_clients(self) -> int:
        """The number of clients that train in every round, i.e. ceil(fraction * K), never below 1"""
        count = math.ceil(round(self.participation_fraction * self.clients, 9))
        return max(1, min(self.clients, count))


class ModelConfig(_StrictModel):
    hidden_widths: list[int] = Field(default_factory=lambda: [128, 128], min_length=1)
    bn_momentum: float = Field(default=0.9, gt=0, lt=1)
    bn_epsilon: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def _positive_widths(self) -> "ModelConfig":
        if any(width < 1 for width in self.hidden_widths):
            raise ValueError("Every hidden width must be at least 1")
        return self


class DataConfig(_StrictModel):
    source: Literal["synth", "idx"] = "synth"
    classes: int = Field(default=10, ge=2)
    dim: int = Field(default=64, ge=1)
    per_class: int = Field(default=200, ge=1)
    spread: float = Field(default=0.5, ge=0)
    images_path: Path | None = None
    labels_path: Path | None = None
    test_fraction: float = Field(default=0.1, gt=0, lt=1)
    dirichlet_xi: float | None = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _idx_needs_paths(self) -> "DataConfig":
        if self.source == "idx" and (self.images_path is None or self.labels_path is None):
            raise ValueError("An IDX data source needs both images_path and labels_path")
        return self


class WatermarkConfig(_StrictModel):
    enabled: bool = True
    lr: float = Field(default=0.005, gt=0)
    acc_threshold: float = Field(default=0.98, gt=0, le=1)
    verify_threshold: float = Field(default=0.5, ge=0, le=1)
    max_iter: int = Field(default=200, ge=0)
    noise_sigma: float = Field(default=0.1, ge=0)
    per_class: int = Field(default=10, ge=1)
    pattern_scale: float = Field(default=4.0, gt=0)
    projection: bool = True
    freeze_bn: bool = True
    memory_mode: Literal["sum", "average"] = "sum"


class GaConfig(_StrictModel):
    population: int = Field(default=64, ge=2)
    generations: int = Field(default=200, ge=0)
    crossover_rate: float = Field(default=0.9, ge=0, le=1)
    mutation_rate: float | None = Field(default=None, ge=0, le=1)
    tournament_k: int = Field(default=3, ge=1)
    seed: int = 0


class FingerprintConfig(_StrictModel):
    enabled: bool = True
    bits: int = Field(default=128, ge=1)
    lr: float = Field(default=0.05, gt=0)
    fss_threshold: float = Field(default=0.95, gt=0, le=1)
    max_iter: int = Field(default=500, ge=0)
    margin: float = Field(default=0.1, gt=0)
    max_backtracks: int = Field(default=20, ge=0)
    ga: GaConfig = Field(default_factory=GaConfig)


class ProtectionConfig(_StrictModel):
    watermark: WatermarkConfig = Field(default_factory=WatermarkConfig)
    fingerprint: FingerprintConfig = Field(default_factory=FingerprintConfig)

    @classmethod
    def unprotected(cls) -> "ProtectionConfig":
        return cls(watermark=WatermarkConfig(enabled=False), fingerprint=FingerprintConfig(enabled=False))


class ExperimentConfig(_StrictModel):
    seed: int = 0
    output_dir: Path = Path("runs/default")
    fl: FlConfig = Field(default_factory=FlConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    watermark: WatermarkConfig = Field(default_factory=WatermarkConfig)
    fingerprint: FingerprintConfig = Field(default_factory=FingerprintConfig)
    attacks: list[str] = Field(default_factory=list)
    attack_clients: int = Field(default=3, ge=0)
    utility_drop_threshold: float = Field(default=0.05, ge=0, le=1)

    @property
    def protection(self) -> ProtectionConfig:
        return ProtectionConfig(watermark=self.watermark, fingerprint=self.fingerprint)

    def with_protection(self, protection: ProtectionConfig) -> "ExperimentConfig":
        return self.model_copy(update={"watermark": protection.watermark, "fingerprint": protection.fingerprint})

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        """
        A short, stable identifier of everything that influences the numbers a run produces.
        The output directory is left out, so that the same experiment written to two
        places still shares a hash.
        """
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
        return digest[:12]


def _check_attack_specs(experiment: ExperimentConfig) -> None:
    from src.attacks import parse_attack_spec  # Imported here because the attacks module depends on this one

    for spec in experiment.attacks:
        _ = parse_attack_spec(spec)


def parse_experiment_config(payload: dict[str, Any]) -> ExperimentConfig:
    try:
        experiment = ExperimentConfig.model_validate(payload)
    except ValidationError as error:
        raise ConfigError(f"Invalid experiment configuration:\n{error}") from error

    _check_attack_specs(experiment)
    return experiment


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """
    Read and validate an experiment configuration from a JSON file.

    Args:
        path (Path | str): the location of the JSON document.

    Raises:
        ConfigError: if the file is missing, is not JSON, or does not satisfy the schema.

    Returns:
        ExperimentConfig: the validated configuration
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"No configuration file at {path}")

    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise ConfigError(f"{path} is not valid JSON: {error}") from error

    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must contain a JSON object at the top level")

    return parse_experiment_config(payload)


def apply_overrides(experiment: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """
    Return a copy of the configuration with dotted keys (e.g. "fingerprint.bits") replaced.
    The result is validated again, so overrides obey the same rules as the file itself.
    """
    payload = experiment.model_dump(mode="json")

    for dotted_key, value in overrides.items():
        *parents, leaf = dotted_key.split(".")
        node = payload
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"'{dotted_key}' does not name a configuration section")
            node = node[part]

        if leaf not in node:
            raise ConfigError(f"'{dotted_key}' is not a configuration key")
        node[leaf] = value

    return parse_experiment_config(payload)
