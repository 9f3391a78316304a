import os
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, Field, FilePath, ValidationError, field_validator, model_validator

from pauli_core import (
    GeneratorForm,
    StochasticPauliChannel,
    depolarizing_channel,
    load_channel_file,
)
from circuit_model import infidelity_to_depolarizing

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Invalid environment or experiment configuration."""


# ===== General Config =====
LOG_LEVEL = os.environ.get("FPEC_LOG_LEVEL", "INFO").upper()
THREADS = int(os.environ.get("FPEC_THREADS", 1))
OUTPUT_DIR = Path(os.environ.get("FPEC_OUTPUT_DIR", "results"))

# ===== Database Config =====
DATABASE_PATH = os.environ.get("FPEC_DATABASE_PATH", "fpec_results.db")

# ===== Oracle Limits =====
ORACLE_MAX_QUBITS = int(os.environ.get("FPEC_ORACLE_MAX_QUBITS", 12))
SUPEROP_MAX_QUBITS = 2
SUPEROP_MAX_SITES = 6

# Validate environment
if THREADS < 1:
    raise ValueError(f"FPEC_THREADS must be >= 1, got {THREADS}")
if not 1 <= ORACLE_MAX_QUBITS <= 12:
    raise ValueError(f"FPEC_ORACLE_MAX_QUBITS must be in 1..12, got {ORACLE_MAX_QUBITS}")

# ===== Experiment Defaults =====
METHODS = ("raw", "fpec", "pec", "zne")
DEFAULT_ZNE_SCALES = [1.0, 4.0]


class LatticeConfig(BaseModel):
    rows: int = Field(3, ge=1)
    cols: int = Field(3, ge=1)
    J: float = 1.0
    h: float = 2.0
    tau: float = 0.2
    initial_angle: float = 0.0


class ChannelConfig(BaseModel):
    kind: Literal["depolarizing", "pauli", "file"] = "depolarizing"
    arity: int = Field(2, ge=1, le=4)
    eps: float | None = Field(None, ge=0.0, lt=1.0)
    avg_infidelity: float | None = Field(None, ge=0.0, lt=1.0)
    probs: dict[str, float] | None = None
    path: FilePath | None = None
    generator: GeneratorForm = GeneratorForm.PAULI

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == "depolarizing" and (self.eps is None) == (self.avg_infidelity is None):
            raise ValueError("depolarizing channel needs exactly one of eps / avg_infidelity")
        if self.kind == "pauli" and not self.probs:
            raise ValueError("pauli channel needs a probs table")
        if self.kind == "file" and self.path is None:
            raise ValueError("file channel needs a path")
        return self

    def build(self) -> StochasticPauliChannel:
        if self.kind == "file":
            return load_channel_file(self.path)
        if self.kind == "pauli":
            return StochasticPauliChannel.from_probs(self.probs, n=self.arity)
        if self.eps is not None:
            return depolarizing_channel(self.arity, self.eps)
        return infidelity_to_depolarizing(self.avg_infidelity, self.arity)


class TruncationConfig(BaseModel):
    policy: Literal["shots", "bias", "fixed"] = "bias"
    delta: float = Field(1e-3, gt=0.0)
    order: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def check_order(self):
        if self.policy == "fixed" and self.order is None:
            raise ValueError("fixed truncation needs an order")
        return self


class StepRange(BaseModel):
    start: int = Field(0, ge=0)
    stop: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_bounds(self):
        if self.stop < self.start:
            raise ValueError("step range stop must be >= start")
        return self


class ExperimentConfig(BaseModel):
    name: str = "experiment"
    lattice: LatticeConfig = LatticeConfig()
    channel: ChannelConfig
    assumed_channel: ChannelConfig | None = None
    methods: list[Literal["raw", "fpec", "pec", "zne"]] = ["raw", "fpec"]
    shots: int = Field(5000, ge=1)
    truncation: TruncationConfig = TruncationConfig()
    zne_scales: list[float] = Field(default_factory=lambda: list(DEFAULT_ZNE_SCALES))
    steps: list[int] | StepRange = [1]
    seed: int = Field(..., ge=0, lt=2 ** 64)
    observable: Literal["sz_squared", "z_prefix_average", "pauli_z"] = "sz_squared"
    observable_qubits: list[int] = []
    exact: bool | None = None
    estimation: Literal["sampled", "oracle"] = "sampled"
    output: Path | None = None
    format: Literal["csv", "json"] = "csv"

    @field_validator("zne_scales")
    @classmethod
    def check_scales(cls, scales):
        if len(scales) < 2:
            raise ValueError("ZNE needs at least two scales")
        if scales[0] < 1.0 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("ZNE scales must be strictly increasing and start at >= 1")
        return scales

    @field_validator("steps")
    @classmethod
    def check_steps(cls, steps):
        if isinstance(steps, list) and any(s < 0 for s in steps):
            raise ValueError("step counts must be >= 0")
        return steps

    @property
    def step_list(self) -> list[int]:
        if isinstance(self.steps, StepRange):
            return list(range(self.steps.start, self.steps.stop + 1))
        return sorted(set(self.steps))


def load_experiment_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML or JSON experiment file; overrides replace top-level keys."""
    path = Path(path)
    try:
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    # channel files are relative to the config file
    for key in ("channel", "assumed_channel"):
        section = data.get(key)
        if isinstance(section, dict) and section.get("path"):
            channel_path = Path(section["path"])
            if not channel_path.is_absolute():
                section["path"] = str(path.parent / channel_path)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}:\n{e}") from e
