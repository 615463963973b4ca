"""Settings management for cipherctl."""

import json
import logging
import os
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ENV_THREADS = "CIPHERCTL_THREADS"
ENV_LANG = "CIPHERCTL_LANG"
ENV_LOG_LEVEL = "CIPHERCTL_LOG_LEVEL"


class CtlConfig(BaseModel):
    """Horizons, diagonal costs and penalties of the data-driven controller."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    M: int = Field(4, ge=1)
    N: int = Field(4, ge=1)
    T: int = Field(32, ge=0)
    T_bar: int = Field(15, ge=0)
    q_bar: list[float] = Field(default_factory=lambda: [1.0], min_length=1)
    r_bar: list[float] = Field(default_factory=lambda: [1e-3], min_length=1)
    lambda_g: float = Field(5.0, gt=0)
    lambda_u: float = Field(1.0, gt=0)
    lambda_y: float = Field(1.0, gt=0)
    refresh_period: int = Field(5, ge=1)
    alpha: int = Field(1024, ge=1)

    @field_validator("q_bar", "r_bar")
    @classmethod
    def _positive(cls, value: list[float]) -> list[float]:
        if any(v <= 0 for v in value):
            raise ValueError("cost diagonals must be positive")
        return value

    @property
    def L(self) -> int:
        return self.M + self.N

    @property
    def S(self) -> int:
        """Offline column count T - M - N + 1."""
        return self.T - self.M - self.N + 1

    def _block(self, diag: list[float], width: int) -> np.ndarray:
        if len(diag) not in (1, width):
            raise ConfigError(f"cost diagonal of length {len(diag)} does not fit block size {width}")
        return np.tile(np.resize(np.array(diag, dtype=np.float64), width), self.N)

    def Q(self, p: int) -> np.ndarray:
        """Diagonal of Q = blockdiag(Q_bar, ..., Q_bar), length pN."""
        return self._block(self.q_bar, p)

    def R(self, m: int) -> np.ndarray:
        """Diagonal of R, length mN."""
        return self._block(self.r_bar, m)


class HEConfig(BaseModel):
    """Ring dimension, moduli chain and protocol switches of the encrypted runs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ring_dim: int = 16384
    moduli: int = Field(14, ge=0)
    first_mod_bits: int = Field(60, ge=20, le=60)
    scale_bits: int = Field(50, ge=20, le=60)
    security: str = "unspecified"
    hoisted_rotations: bool = False
    function_privacy: bool = False

    @field_validator("ring_dim")
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if value < 8 or value & (value - 1):
            raise ValueError("ring_dim must be a power of two >= 8")
        return value

    @property
    def slots(self) -> int:
        return self.ring_dim // 2


class RunConfig(BaseModel):
    """Flat on-disk run configuration."""

    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    plant: str = "thermal_2zone"
    plant_file: str | None = None
    mode: Literal["plain", "encrypted", "paired"] = "paired"
    steps: int = Field(45, ge=1)
    seed: int = 0
    output_dir: str = "results"
    noiseless: bool = False
    setpoint: list[float] | None = None
    # controller
    M: int = Field(4, ge=1)
    N: int = Field(4, ge=1)
    T: int = Field(32, ge=0)
    T_bar: int = Field(15, ge=0)
    q_bar: list[float] = Field(default_factory=lambda: [1.0])
    r_bar: list[float] = Field(default_factory=lambda: [1e-3])
    lambda_g: float = 5.0
    lambda_u: float = 1.0
    lambda_y: float = 1.0
    refresh_period: int = Field(5, ge=1)
    alpha: int = Field(1024, ge=1)
    # homomorphic encryption
    he_preset: str | None = "desk_8192"
    ring_dim: int | None = None
    moduli: int | None = None
    first_mod_bits: int | None = None
    scale_bits: int | None = None
    hoisted_rotations: bool = False
    function_privacy: bool = False
    # analyses
    closeness_k_max: int = Field(6, ge=0)
    closeness_path: list[tuple[float, float]] | None = None
    precision_grid: list[float] = Field(default_factory=lambda: np.logspace(-9, 9, 12).tolist())

    @model_validator(mode="after")
    def _horizons(self) -> "RunConfig":
        if self.T < self.M + self.N:
            raise ValueError(f"T={self.T} leaves no Hankel column for M+N={self.M + self.N}")
        return self


def _load_json_resource(name: str) -> dict[str, Any]:
    return json.loads(resources.files("cipherctl.data").joinpath(name).read_text(encoding="utf-8"))


def load_he_presets() -> dict[str, dict[str, Any]]:
    data = _load_json_resource("he_presets.json")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported HE preset schema version: {data.get('schema_version')}")
    return data["presets"]


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{key}: {err['msg']}")
    return "; ".join(lines)


def load_config(path: Path | str) -> RunConfig:
    """
    Read and validate a run configuration file.

    Raises:
        ConfigError: Missing file, malformed JSON or field-level validation failures
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {format_validation_error(exc)}") from exc


class Settings:
    """Resolved view of a run configuration plus environment overrides."""

    DEFAULT_THREADS = os.cpu_count() or 1
    DEFAULT_LANGUAGE = ""
    DEFAULT_LOG_LEVEL = "INFO"
    DEFAULT_HE_PRESET = "desk_8192"

    def __init__(self, config: RunConfig | None = None):
        self._config = config or RunConfig()

    @property
    def config(self) -> RunConfig:
        return self._config

    def get_threads(self) -> int:
        """Worker threads for parallel sweeps."""
        value = os.environ.get(ENV_THREADS, "")
        try:
            return max(1, int(value)) if value else self.DEFAULT_THREADS
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", ENV_THREADS, value)
            return self.DEFAULT_THREADS

    def get_language(self) -> str:
        return os.environ.get(ENV_LANG, self.DEFAULT_LANGUAGE)

    def get_log_level(self) -> str:
        return os.environ.get(ENV_LOG_LEVEL, self.DEFAULT_LOG_LEVEL).upper()

    def get_output_dir(self) -> Path:
        return Path(self._config.output_dir)

    def get_ctl_config(self) -> CtlConfig:
        c = self._config
        try:
            return CtlConfig(
                M=c.M,
                N=c.N,
                T=c.T,
                T_bar=c.T_bar,
                q_bar=c.q_bar,
                r_bar=c.r_bar,
                lambda_g=c.lambda_g,
                lambda_u=c.lambda_u,
                lambda_y=c.lambda_y,
                refresh_period=c.refresh_period,
                alpha=c.alpha,
            )
        except ValidationError as exc:
            raise ConfigError(format_validation_error(exc)) from exc

    def get_plant(self):
        from ..modules.plant import load_preset

        model = load_preset(self._config.plant, self._config.plant_file)
        return model.noiseless() if self._config.noiseless else model

    def get_setpoint(self, model) -> np.ndarray:
        if self._config.setpoint is not None:
            return np.array(self._config.setpoint, dtype=np.float64)
        if model.setpoint is None:
            raise ConfigError(f"plant {model.name!r} has no default setpoint; set 'setpoint'")
        return model.setpoint

    def get_he_config(self, required_moduli: int | None = None) -> HEConfig:
        """
        HE parameters from the preset, overridden by explicit keys.

        A moduli count of 0 means "as many as the circuit needs" and is resolved from
        required_moduli.
        """
        c = self._config
        fields: dict[str, Any] = {}
        if c.he_preset is not None:
            presets = load_he_presets()
            if c.he_preset not in presets:
                raise ConfigError(f"he_preset: unknown preset {c.he_preset!r}; available: {', '.join(sorted(presets))}")
            fields.update(presets[c.he_preset])
        for key in ("ring_dim", "moduli", "first_mod_bits", "scale_bits"):
            if getattr(c, key) is not None:
                fields[key] = getattr(c, key)
        fields["hoisted_rotations"] = c.hoisted_rotations
        fields["function_privacy"] = c.function_privacy
        if not fields.get("moduli"):
            if required_moduli is None:
                raise ConfigError("moduli: automatic chain length needs the circuit depth")
            fields["moduli"] = required_moduli
        try:
            return HEConfig(**fields)
        except ValidationError as exc:
            raise ConfigError(format_validation_error(exc)) from exc

    def check_feasibility(self, m: int, p: int) -> HEConfig:
        """
        Slot-footprint and depth checks for the encrypted modes.

        Returns:
            The resolved HE configuration

        Raises:
            ConfigError: naming the keys of the violated rule
        """
        from ..modules.protocol import footprint_rules, required_moduli

        ctl = self.get_ctl_config()
        needed = required_moduli(ctl, self._config.function_privacy)
        he = self.get_he_config(needed)
        if he.moduli < needed:
            raise ConfigError(f"moduli: {he.moduli} moduli cannot host circuit depth {needed - 1} (need {needed}; lower refresh_period or raise moduli)")
        for rule, (used, available) in footprint_rules(m, p, ctl, he.slots).items():
            if used > available:
                raise ConfigError(f"ring_dim/M/N/T_bar: {rule} footprint {used} exceeds {available} slots")
        return he
