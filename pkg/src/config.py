import json
import os
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .utils import parse_float_list, parse_int_list, parse_str_list

THEMES = ["lab", "mono"]
ENV_PREFIX = "LOVME_"
ESTIMATORS = ("lovme", "mc_dropout", "ground_truth")

ProposalKernelName = Literal["single_flip", "size_resample"]
OracleMode = Literal["true_label", "predicted_label", "random_label"]
UncertaintyScale = Literal["minmax", "raw", "std"]


class GibbsParams(BaseModel):
    """Inverse temperature beta (conjugate to loss) and chemical potential eta
    (conjugate to unit count). Stored separately, never as eta/beta."""

    model_config = ConfigDict(frozen=True)

    beta: float = Field(default=1.0, ge=0.0, allow_inf_nan=False)
    eta: float = Field(default=0.0, allow_inf_nan=False)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    hidden_widths: tuple[int, ...] = (32, 16)
    dropout_p: float = Field(default=0.5, gt=0.0, le=1.0)
    learning_rate: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, gt=0)
    seed: int = 0
    mask_inputs: bool = False

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _split_widths(cls, value: Any) -> Any:
        return parse_int_list(value) if isinstance(value, str) else value

    @field_validator("hidden_widths")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if any(width <= 0 for width in value):
            raise ValueError("hidden widths must be positive")
        return value


class ChainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: GibbsParams = GibbsParams()
    transitions: int = Field(default=5000, gt=0)
    burn_in: int = Field(default=100, ge=0)
    thin: int = Field(default=1, ge=1)
    proposal_kernel: ProposalKernelName = "single_flip"
    seed: int = 0

    @model_validator(mode="after")
    def _burn_in_below_transitions(self) -> "ChainConfig":
        if self.burn_in >= self.transitions:
            raise ValueError(f"burn_in ({self.burn_in}) must be below transitions ({self.transitions})")
        return self

    @property
    def recorded_states(self) -> int:
        return len(range(self.burn_in + self.thin, self.transitions + 1, self.thin))


class ExperimentConfig(BaseModel):
    """Everything one reproducible run needs, flat so it maps onto a
    `key=value` file and onto CLI flags one-to-one."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    # data
    dataset_source: Literal["synthetic", "idx", "csv"] = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    image_shape: Optional[tuple[int, ...]] = None
    class_count: int = Field(default=2, ge=2)
    train_size: int = Field(default=400, gt=0)
    test_size: int = Field(default=200, gt=0)
    synth_dim: int = Field(default=2, ge=2)
    synth_noise_sigma: float = Field(default=1.0, ge=0.0)
    synth_label_noise_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    data_seed: int = 0
    perturb_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    perturb_rotation_deg: float = Field(default=30.0, ge=0.0)
    perturb_noise_sigma: float = Field(default=0.1, ge=0.0)
    perturb_seed: int = 1

    # training
    hidden_widths: tuple[int, ...] = (32, 16)
    dropout_p: float = Field(default=0.5, gt=0.0, le=1.0)
    learning_rate: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=32, gt=0)
    train_seed: int = 0
    mask_inputs: bool = False

    # chains
    beta: Optional[float] = Field(default=None, ge=0.0, allow_inf_nan=False)
    eta: float = Field(default=0.0, allow_inf_nan=False)
    transitions: int = Field(default=5000, gt=0)
    burn_in: int = Field(default=100, ge=0)
    thin: int = Field(default=1, ge=1)
    proposal_kernel: ProposalKernelName = "single_flip"
    chain_seed: int = 0
    loss_oracle: OracleMode = "predicted_label"
    oracle_seed: int = 0
    write_traces: bool = True

    # estimators and evaluation
    estimators: tuple[str, ...] = ("lovme", "mc_dropout")
    mc_samples: int = Field(default=1000, ge=2)
    mc_p: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    mc_seed: int = 0
    ensemble_size: int = Field(default=50, ge=2)
    ensemble_seed: int = 0
    rejection_quantiles: tuple[float, ...] = (0.05, 0.1, 0.2)
    uncertainty_scale: UncertaintyScale = "minmax"
    correlation_cutoff: float = Field(default=1.0, gt=0.0, le=1.0)

    # exact-enumeration cross-check
    oracle_check: bool = False
    oracle_hidden_widths: tuple[int, ...] = (6,)
    oracle_betas: tuple[float, ...] = (0.5, 1.0, 2.0)
    oracle_etas: tuple[float, ...] = (0.0, 0.25)
    oracle_states: int = Field(default=50_000, ge=2)
    oracle_sample_index: int = Field(default=0, ge=0)

    workers: int = Field(default=1, ge=1)
    output_dir: str = "lovme-run"

    @field_validator("hidden_widths", "oracle_hidden_widths", "image_shape", mode="before")
    @classmethod
    def _split_ints(cls, value: Any) -> Any:
        if isinstance(value, str):
            return parse_int_list(value) or None
        return value

    @field_validator("rejection_quantiles", "oracle_betas", "oracle_etas", mode="before")
    @classmethod
    def _split_floats(cls, value: Any) -> Any:
        return parse_float_list(value) if isinstance(value, str) else value

    @field_validator("estimators", mode="before")
    @classmethod
    def _split_names(cls, value: Any) -> Any:
        return parse_str_list(value) if isinstance(value, str) else value

    @field_validator("beta", "mc_p", mode="before")
    @classmethod
    def _auto_is_none(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "auto", "none"):
            return None
        return value

    @field_validator("estimators")
    @classmethod
    def _known_estimators(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [name for name in value if name not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators {unknown}; choose from {', '.join(ESTIMATORS)}")
        return value

    @field_validator("rejection_quantiles")
    @classmethod
    def _quantile_range(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if any(not 0.0 <= q < 1.0 for q in value):
            raise ValueError("rejection quantiles must lie in [0, 1)")
        return value

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if self.burn_in >= self.transitions:
            raise ValueError(f"burn_in ({self.burn_in}) must be below transitions ({self.transitions})")
        if self.oracle_check and not (self.oracle_betas and self.oracle_etas):
            raise ValueError("the oracle grid needs at least one beta and one eta")
        if any(beta < 0 for beta in self.oracle_betas):
            raise ValueError("oracle betas must be nonnegative")
        return self

    @classmethod
    def load(
        cls, path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> "ExperimentConfig":
        """Key-value file, then LOVME_* environment variables, then overrides."""
        load_dotenv()
        values: dict[str, Any] = {}
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file '{path}' not found")
            values.update({k.lower(): v for k, v in dotenv_values(path).items() if v is not None})
        for name in cls.model_fields:
            env_value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if env_value is not None:
                values[name] = env_value
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration:\n{e}") from e

    @classmethod
    def from_manifest(cls, path: str | Path) -> "ExperimentConfig":
        try:
            manifest = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls.model_validate(manifest["config"])
        except (OSError, KeyError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config from manifest '{path}': {e}") from e
        except ValidationError as e:
            raise ConfigError(f"manifest '{path}' holds an invalid config:\n{e}") from e

    def check_paths(self) -> None:
        """Every file the chosen data source needs must exist at run start."""
        needed = {
            "synthetic": [],
            "idx": ["train_images", "train_labels", "test_images", "test_labels"],
            "csv": ["train_csv", "test_csv"],
        }[self.dataset_source]
        for name in needed:
            value = getattr(self, name)
            if value is None or not Path(value).is_file():
                raise ConfigError(f"{name} must point to an existing file (got {value!r})")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden_widths=self.hidden_widths,
            dropout_p=self.dropout_p,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.train_seed,
            mask_inputs=self.mask_inputs,
        )

    def chain_config(self, beta: float) -> ChainConfig:
        return ChainConfig(
            params=GibbsParams(beta=beta, eta=self.eta),
            transitions=self.transitions,
            burn_in=self.burn_in,
            thin=self.thin,
            proposal_kernel=self.proposal_kernel,
            seed=self.chain_seed,
        )


class AppSettings(BaseModel):
    """Presentation settings for the command-line front-end."""

    theme: str = "lab"

    @classmethod
    def load(cls) -> "AppSettings":
        load_dotenv()
        theme = os.getenv(f"{ENV_PREFIX}THEME", "lab")
        if theme not in THEMES:
            raise ConfigError(f"Invalid theme '{theme}'. Must be one of: {', '.join(THEMES)}")
        return cls(theme=theme)
