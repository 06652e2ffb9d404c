# config/run_config.py - Flat key = value run configuration with CLI overrides
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from models.koopman_models import LiftKind, TrainConfig
from models.planning_models import MonitorMetric, TriggerPolicy, TriggerRule
from utils.errors import ConfigError


class RunConfig(BaseModel):
    """Every tunable of a run; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Randomness
    seed: int = 0

    # Koopman training
    lift: LiftKind = LiftKind.MLP
    lift_dim: int = Field(256, ge=1)
    hidden_widths: Tuple[int, int] = (128, 256)
    encoder_lr: float = Field(5e-4, gt=0)
    koopman_lr: float = Field(5e-5, gt=0)
    separate_lr: bool = True
    horizon: int = Field(15, ge=1)
    identity_init: bool = True
    clip_max_norm: float = Field(1.0, gt=0)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(64, ge=1)
    detach_targets: bool = True
    truncate_tail: bool = True
    freeze_koopman: bool = False
    koopman_refit: bool = True
    refit_ridge: float = Field(1e-6, gt=0)
    encoder_output_scale: float = Field(1e-2, gt=0)
    log_every: int = Field(10, ge=1)
    ridge: float = Field(0.0, ge=0)

    # Replanning
    monitor_metric: MonitorMetric = MonitorMetric.FLOW_CENTROID
    trigger_threshold: float = Field(4.0, gt=0)
    trigger_persistence: int = Field(2, ge=1)
    trigger_rule: TriggerRule = TriggerRule.ABSOLUTE
    trigger_jump_window: int = Field(5, ge=1)
    plan_horizon: int = Field(0, ge=0)

    # Synthetic benchmark
    env_kind: str = "linear-coupled"
    num_demos: int = Field(30, ge=1)
    episode_horizon: int = Field(0, ge=0)
    success_radius: float = Field(0.05, gt=0)
    goal_conditioned: bool = False
    perturb_step: int = Field(20, ge=0)
    perturb_radius: float = Field(0.5, ge=0)
    action_noise: float = Field(0.0, ge=0)
    episodes: int = Field(30, ge=1)

    # Flow codec
    flow_lr: float = Field(1e-3, gt=0)
    flow_epochs: int = Field(300, ge=0)
    flow_lr_decay: float = Field(0.99, gt=0, le=1)
    flow_batch_size: int = Field(64, ge=1)

    # Metrics
    percentile_bins: int = Field(100, ge=1)

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def _parse_widths(cls, value):
        if isinstance(value, str):
            parts = [p for p in value.replace(" ", "").split(",") if p]
            return tuple(int(p) for p in parts)
        return value

    @field_validator("env_kind")
    @classmethod
    def _known_env(cls, value: str) -> str:
        if value not in ("linear-coupled", "reach-grasp-move", "pendulum-push"):
            raise ValueError(f"unknown env kind '{value}'")
        return value

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lift=self.lift, lift_dim=self.lift_dim, hidden_widths=self.hidden_widths,
            encoder_lr=self.encoder_lr, koopman_lr=self.koopman_lr, separate_lr=self.separate_lr,
            horizon=self.horizon, identity_init=self.identity_init, clip_max_norm=self.clip_max_norm,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            detach_targets=self.detach_targets, truncate_tail=self.truncate_tail,
            freeze_koopman=self.freeze_koopman, koopman_refit=self.koopman_refit,
            refit_ridge=self.refit_ridge, encoder_output_scale=self.encoder_output_scale,
            log_every=self.log_every,
        )

    def trigger_policy(self) -> TriggerPolicy:
        return TriggerPolicy(
            threshold=self.trigger_threshold, persistence=self.trigger_persistence,
            rule=self.trigger_rule, jump_window=self.trigger_jump_window,
        )


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if hasattr(value, "value"):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment"""
    values: Dict[str, str] = {}
    known = set(RunConfig.model_fields)
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{line_number}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{line_number}: duplicate key '{key}'")
        values[key] = value
    return values


def load_config_file(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    config = build_config(parse_config_text(text, source=str(path)))
    logger.debug(f"Loaded config file {path}")
    return config


def build_config(values: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Validate raw values on top of an optional base config"""
    merged = {} if base is None else base.model_dump()
    merged.update(values)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def merge_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply CLI flag values that were actually given (None means absent)"""
    given = {key: value for key, value in overrides.items() if value is not None}
    if not given:
        return config
    unknown = set(given) - set(RunConfig.model_fields)
    if unknown:
        raise ConfigError(f"unknown override keys: {sorted(unknown)}")
    return build_config(given, base=config)


def render_config(config: RunConfig) -> str:
    lines = ["# effective configuration"]
    for key in RunConfig.model_fields:
        lines.append(f"{key} = {_format_value(getattr(config, key))}")
    return "\n".join(lines) + "\n"


def dump_effective(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Write `config.effective` next to a run's outputs"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.effective"
    path.write_text(render_config(config), encoding="utf-8")
    logger.debug(f"Effective config written to {path}")
    return path
