"""Validated run configuration.

A run is driven by one JSON document with a versioned schema. Unknown
keys are rejected so typos fail before any compute. The same models
back the config file, the service request bodies, and the manifest
snapshot, which is why a resolved config always round-trips.
"""

from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

CONFIG_SCHEMA_VERSION = 1

STRATEGY_PRESETS = (
    "full",
    "no_prompt_filtering",
    "no_preference_sampling",
    "no_distribution_weighting",
    "none",
)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DiffusionSettings(StrictModel):
    """Model and trainer hyperparameters for the denoiser."""

    data_dim: int = Field(2, ge=1)
    timesteps: int = Field(50, ge=1)
    beta_min: float = Field(1e-4, gt=0, lt=1)
    beta_max: float = Field(0.2, gt=0, lt=1)
    hidden: list[int] = Field(default_factory=lambda: [24, 24])
    embed_dim: int = Field(2, ge=1)
    time_freqs: int = Field(4, ge=0)
    lr: float = Field(3e-4, gt=0)
    round_lr: Optional[float] = Field(1e-3, gt=0)  # None: same as lr
    batch_size: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _check_range(self):
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        return self


class CurationSettings(StrictModel):
    """Selection size, weighting knobs, and the distance definition.

    beta/sigma_sq left null are calibrated once from the frozen
    reference pool: beta at the 90th percentile of reference
    self-distances, sigma_sq at half their interquartile range.
    """

    k_select: int = Field(300, ge=1)
    beta: Optional[float] = Field(None, ge=0)
    sigma_sq: Optional[float] = Field(None, gt=0)
    alignment_weight: float = Field(0.7, ge=0)
    aesthetic_weight: float = Field(0.3, ge=0)
    distance_mode: Literal["mean", "nearest"] = "mean"

    @model_validator(mode="after")
    def _check_mixture(self):
        if abs(self.alignment_weight + self.aesthetic_weight - 1.0) > 1e-9:
            raise ValueError("scorer mixture weights must sum to 1")
        return self


class StrategySettings(StrictModel):
    """Which curation strategies a run applies.

    Uniform-random selection and preference sampling are mutually
    exclusive views of the same choice, so the two fields are coerced to
    agree (uniform_random forces use_preference_sampling off and vice
    versa).
    """

    use_prompt_filtering: bool = True
    use_preference_sampling: bool = True
    use_distribution_weighting: bool = True
    selection_mode: Literal["top_k", "uniform_random"] = "top_k"

    @model_validator(mode="after")
    def _coerce_selection(self):
        if self.selection_mode == "uniform_random":
            object.__setattr__(self, "use_preference_sampling", False)
        elif not self.use_preference_sampling:
            object.__setattr__(self, "selection_mode", "uniform_random")
        return self


def strategy_preset(name: str) -> StrategySettings:
    """Named strategy configurations used by the ablation grids."""
    if name == "full":
        return StrategySettings()
    if name == "no_prompt_filtering":
        return StrategySettings(use_prompt_filtering=False)
    if name == "no_preference_sampling":
        return StrategySettings(use_preference_sampling=False, selection_mode="uniform_random")
    if name == "no_distribution_weighting":
        return StrategySettings(use_distribution_weighting=False)
    if name == "none":
        return StrategySettings(
            use_prompt_filtering=False,
            use_preference_sampling=False,
            use_distribution_weighting=False,
            selection_mode="uniform_random",
        )
    raise ValueError(f"unknown strategy preset {name!r}; pick from {STRATEGY_PRESETS}")


class PromptSettings(StrictModel):
    """Prompt pool source, quality filtering, and per-round draws."""

    source: str = "generated"  # "generated" or a path to a pool JSON file
    size: int = Field(1600, ge=1)
    vague_fraction: float = Field(0.35, ge=0, lt=1)
    jitter: float = Field(0.1, gt=0)
    norm_limit: float = Field(2.0, gt=0)
    n_clusters: Optional[int] = Field(None, ge=1)
    per_cluster: int = Field(75, ge=1)
    per_round: int = Field(500, ge=1)
    disjoint_rounds: bool = False


class EvaluationSettings(StrictModel):
    """Held-out evaluation performed after every round.

    mmd_bandwidth left null picks the median pairwise distance within
    each eval condition's reference draw, which is fine enough to see
    within-mode drift.
    """

    n_samples: int = Field(1000, ge=4)
    hallucination_quantile: float = Field(0.001, gt=0, lt=1)
    calibration_draws: int = Field(10000, ge=100)
    mmd_bandwidth: Optional[float] = Field(None, gt=0)


class BaseModelSettings(StrictModel):
    """How the base model is fitted to world data before round 1."""

    draws_per_condition: int = Field(5, ge=1)
    epochs: int = Field(8, ge=0)


class RunConfig(StrictModel):
    """Everything a run needs; serialized verbatim into the manifest."""

    schema_version: int = CONFIG_SCHEMA_VERSION
    seed: int = 0
    rounds: int = Field(8, ge=1)
    samples_per_prompt: int = Field(10, ge=1)
    epochs_per_round: int = Field(30, ge=0)
    sft_epochs: int = Field(120, ge=0)
    world: Union[str, dict] = "rings-8"
    output_dir: Optional[str] = None
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings)
    curation: CurationSettings = Field(default_factory=CurationSettings)
    strategy: StrategySettings = Field(default_factory=StrategySettings)
    prompts: PromptSettings = Field(default_factory=PromptSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    base_model: BaseModelSettings = Field(default_factory=BaseModelSettings)

    @model_validator(mode="after")
    def _check_schema(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported config schema_version {self.schema_version}"
            )
        return self

    @property
    def pool_size(self) -> int:
        """Synthetic samples generated per round."""
        return self.prompts.per_round * self.samples_per_prompt


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(config.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def apply_ablation_value(config: RunConfig, parameter: str, value) -> RunConfig:
    """A copy of the config with one swept parameter replaced."""
    cfg = config.model_copy(deep=True)
    if parameter == "beta":
        cfg.curation.beta = float(value)
    elif parameter == "sigma_sq":
        cfg.curation.sigma_sq = float(value)
    elif parameter == "k_select":
        cfg.curation.k_select = int(value)
    elif parameter == "strategy":
        cfg.strategy = strategy_preset(str(value))
    else:
        raise ValueError(
            f"unknown ablation parameter {parameter!r}; "
            "pick from beta, sigma_sq, k_select, strategy"
        )
    return cfg
