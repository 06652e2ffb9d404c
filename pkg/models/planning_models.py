# models/planning_models.py - Plans, monitoring records and episode results
from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class MonitorMetric(str, Enum):
    FLOW_CENTROID = "flow-centroid"
    COSINE = "cosine"


class TriggerRule(str, Enum):
    ABSOLUTE = "absolute"
    JUMP = "jump"


class ExecutionMode(str, Enum):
    OPEN_LOOP = "open-loop"
    MONITORED = "monitored"


class TriggerPolicy(BaseModel):
    threshold: float = Field(1.0, gt=0)
    persistence: int = Field(2, ge=1)
    rule: TriggerRule = TriggerRule.ABSOLUTE
    jump_window: int = Field(5, ge=1)


class Plan(BaseModel):
    """Open-loop rollout; entry k belongs to global step origin_step + k"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    latents: np.ndarray   # (T_l + 1, d_z)
    actions: np.ndarray   # (T_l + 1, d_q)
    features: np.ndarray  # (T_l + 1, d_f), rescale undone
    origin_step: int = 0

    @property
    def horizon(self) -> int:
        return int(self.latents.shape[0]) - 1

    @property
    def last_step(self) -> int:
        return self.origin_step + self.horizon

    def index_of(self, step: int) -> int:
        return step - self.origin_step


class MonitorRecord(BaseModel):
    step: int
    error: float = Field(ge=0)
    triggered: bool = False


class EpisodeStep(BaseModel):
    step: int
    action: List[float]
    predicted_feature_error: Optional[float] = None
    triggered: bool = False
    replanned: bool = False
    occluded: bool = False


class EpisodeTrace(BaseModel):
    """Per-step predictions and observations kept for the prediction-quality metrics"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    predicted_features: np.ndarray  # (T, d_f) from the active plan
    observed_features: np.ndarray   # (T, d_f) as delivered, blackout frames included
    predicted_flows: np.ndarray     # (T, 256, 2)
    true_flows: np.ndarray          # (T, 256, 2)


class EpisodeResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    success: bool
    steps: int
    final_distance: float
    success_radius: float
    logs: List[EpisodeStep] = []
    replan_steps: List[int] = []
    monitor_records: List[MonitorRecord] = []
    trace: Optional[EpisodeTrace] = None

    @model_validator(mode="after")
    def _success_matches_distance(self):
        if self.success != (self.final_distance < self.success_radius):
            raise ValueError("success flag disagrees with final object-goal distance")
        return self

    @property
    def action_stream(self) -> np.ndarray:
        return np.asarray([entry.action for entry in self.logs], dtype=np.float64)

