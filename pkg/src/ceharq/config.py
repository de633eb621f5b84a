"""Configuration loading from environment, YAML files and flat simulation configs."""

import enum
import math
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ConfigError(Exception):
    """Invalid application or simulation configuration."""

    pass


class SimulationConfig(BaseModel):
    workers: int = 1
    out_dir: str = "results"
    chunk_size: int = 250       # Trials per worker task
    progress: bool = True


class LdpcConfig(BaseModel):
    normalization: float = 0.8
    max_iterations: int = 6
    llr_clip: float = 20.0


class ThresholdConfig(BaseModel):
    margin_bits: int = 24           # Coder overhead added to the ideal entropy
    grid_max: float = 0.1
    grid_step: float = 0.005
    bisection_resolution: float = 1e-4
    objective: str = "bler"         # bler | avg_rounds


class DatabaseConfig(BaseModel):
    enabled: bool = True
    path: str = "~/.ceharq/runs.db"


class EnvSettings(BaseSettings):
    """Environment overrides (CEHARQ_ prefix, .env supported)."""

    model_config = SettingsConfigDict(
        env_prefix="CEHARQ_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    workers: Optional[int] = None
    out_dir: Optional[str] = None


class AppConfig(BaseModel):
    """Combined application configuration."""

    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    ldpc: LdpcConfig = Field(default_factory=LdpcConfig)
    threshold: ThresholdConfig = Field(default_factory=ThresholdConfig)
    database: DatabaseConfig = Field(default_factory=DatabaseConfig)

    # Environment settings
    env: EnvSettings = Field(default_factory=EnvSettings)

    def get_workers(self) -> int:
        """Worker count, environment first."""
        return self.env.workers if self.env.workers is not None else self.simulation.workers

    def get_out_dir(self) -> Path:
        """Get expanded results directory."""
        out_dir = self.env.out_dir if self.env.out_dir is not None else self.simulation.out_dir
        return Path(out_dir).expanduser()

    def get_database_path(self) -> Path:
        """Get expanded database path."""
        return Path(self.database.path).expanduser()


def load_config(config_path: Optional[Path] = None) -> AppConfig:
    """Load configuration from YAML file and environment variables.

    Args:
        config_path: Path to a YAML config. If None, looks for ./ceharq.yaml
                    and ~/.ceharq/config.yaml

    Returns:
        AppConfig instance with merged configuration
    """
    yaml_config = {}

    search_paths = [
        config_path,
        Path("ceharq.yaml"),
        Path.home() / ".ceharq" / "config.yaml",
    ]

    for path in search_paths:
        if path and path.exists():
            with open(path) as f:
                yaml_config = yaml.safe_load(f) or {}
            break

    env_settings = EnvSettings()

    config_data = {
        "simulation": yaml_config.get("simulation", {}),
        "ldpc": yaml_config.get("ldpc", {}),
        "threshold": yaml_config.get("threshold", {}),
        "database": yaml_config.get("database", {}),
        "env": env_settings,
    }

    try:
        return AppConfig(**config_data)
    except ValidationError as e:
        raise ConfigError(f"Invalid application config: {e}") from e


# Global config instance (lazy loaded)
_config: Optional[AppConfig] = None


def get_config() -> AppConfig:
    """Get the global configuration instance."""
    global _config
    if _config is None:
        _config = load_config()
    return _config


def set_config(config: AppConfig) -> None:
    """Set the global configuration instance (for testing)."""
    global _config
    _config = config


class ProtocolKind(str, enum.Enum):
    CE_HARQ = "ce_harq"
    HARQ = "harq"
    AIC_AC = "aic_ac"


class ThresholdSource(str, enum.Enum):
    FIXED = "fixed"
    TABLE = "table"
    ANALYTIC = "analytic"
    SEARCH = "search"


class ThresholdMode(str, enum.Enum):
    SINGLE = "single"
    PER_ROUND = "per_round"


class StopRule(str, enum.Enum):
    FIXED = "fixed"
    TARGET_BLER = "target_bler"


class MacMetadata(str, enum.Enum):
    IN_BAND = "in_band"
    GENIE = "genie"


class RoundsInterpretation(str, enum.Enum):
    ROUNDS = "rounds"
    RETRANSMISSIONS = "retransmissions"


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class SimConfig(BaseModel):
    """One experiment, read from a flat `key = value` file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    label: str = "experiment"
    protocol: ProtocolKind = ProtocolKind.CE_HARQ
    phy: str = "convolutional"          # uncoded | convolutional | ldpc
    k: int = Field(default=200, ge=1)
    n: Optional[int] = None             # Checked against the PHY geometry when given
    max_rounds: int = Field(default=4, ge=1)
    rounds_interpretation: RoundsInterpretation = RoundsInterpretation.ROUNDS
    snr_list: list[float] = Field(default_factory=lambda: [0.0])
    trials: int = Field(default=1000, ge=1)
    master_seed: int = Field(default=0, ge=0, lt=1 << 64)

    threshold_source: ThresholdSource = ThresholdSource.FIXED
    tau: float = Field(default=0.05, ge=0.0, le=1.0)
    threshold_table: Optional[str] = None
    pe_table: Optional[str] = None
    threshold_mode: ThresholdMode = ThresholdMode.SINGLE

    stop_rule: StopRule = StopRule.FIXED
    target_bler: float = Field(default=1e-2, gt=0.0, lt=1.0)
    rounds_cap: int = Field(default=16, ge=1)

    mac_rates: list[int] = Field(default_factory=lambda: [2, 3, 4, 6, 8, 12])
    mac_metadata: MacMetadata = MacMetadata.IN_BAND

    conv_generators: list[int] = Field(default_factory=lambda: [0o133, 0o171])
    constraint_length: int = Field(default=7, ge=2, le=16)
    ldpc_matrix: Optional[str] = None
    ldpc_iterations: Optional[int] = Field(default=None, ge=1)
    ldpc_normalization: Optional[float] = Field(default=None, gt=0.0, le=1.0)

    @field_validator("phy")
    @classmethod
    def _check_phy(cls, value: str) -> str:
        value = value.strip().lower()
        if value not in ("uncoded", "convolutional", "ldpc"):
            raise ValueError(f"phy must be uncoded, convolutional or ldpc, got {value!r}")
        return value

    @field_validator("snr_list", "mac_rates", mode="before")
    @classmethod
    def _parse_list(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("conv_generators", mode="before")
    @classmethod
    def _parse_octal(cls, value: Any) -> Any:
        # Generators are written in octal, as in the coding literature
        items = _split_list(value)
        if isinstance(items, list):
            return [int(item, 8) if isinstance(item, str) else item for item in items]
        return items

    @field_validator("snr_list")
    @classmethod
    def _check_snr(cls, value: list[float]) -> list[float]:
        if not value:
            raise ValueError("snr_list must not be empty")
        if any(math.isnan(v) or v == -math.inf for v in value):
            raise ValueError("snr_list values must be real dB values or +inf")
        return value

    @property
    def rounds(self) -> int:
        """Maximum number of rounds D a session may use."""
        if self.stop_rule == StopRule.TARGET_BLER:
            return self.rounds_cap
        if self.rounds_interpretation == RoundsInterpretation.RETRANSMISSIONS:
            return self.max_rounds + 1
        return self.max_rounds

    def with_overrides(self, **overrides: Any) -> "SimConfig":
        """Copy with CLI overrides applied; None values are ignored."""
        update = {key: value for key, value in overrides.items() if value is not None}
        return build_sim_config({**self.model_dump(), **update})


def valid_sim_keys() -> list[str]:
    return list(SimConfig.model_fields.keys())


def build_sim_config(values: dict[str, Any]) -> SimConfig:
    """Validate a key/value mapping into a SimConfig.

    Raises:
        ConfigError: On unknown keys or invalid values
    """
    unknown = sorted(set(values) - set(valid_sim_keys()))
    if unknown:
        raise ConfigError(
            f"Unknown config key(s): {', '.join(unknown)}. "
            f"Valid keys: {', '.join(valid_sim_keys())}"
        )
    try:
        return SimConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid simulation config: {e}") from e


def parse_sim_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"Line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Line {lineno}: missing key")
        if key in values:
            raise ConfigError(f"Line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_sim_config(path: Path) -> SimConfig:
    """Load a simulation config file.

    Args:
        path: Flat `key = value` config file

    Returns:
        Validated SimConfig

    Raises:
        ConfigError: If the file is missing, malformed or has unknown keys
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    values = parse_sim_text(path.read_text())
    # Empty values mean "unset"
    values = {key: value for key, value in values.items() if value != ""}
    return build_sim_config(values)


def dump_sim_config(cfg: SimConfig) -> str:
    """Render a SimConfig back into the flat file format."""
    lines = []
    for key, value in cfg.model_dump().items():
        if value is None:
            continue
        if isinstance(value, enum.Enum):
            value = value.value
        if key == "conv_generators":
            value = ", ".join(f"{g:o}" for g in cfg.conv_generators)
        elif isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
