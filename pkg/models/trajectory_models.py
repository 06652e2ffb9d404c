# models/trajectory_models.py - Demonstration trajectories and datasets
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict


class DemoRecord(BaseModel):
    """One line of the JSON-lines dataset file"""
    initial_joints: List[float]
    actions: List[List[float]]
    features: List[List[float]]
    flow_points: Optional[List[List[List[float]]]] = None
    goal: Optional[List[float]] = None


class Demonstration(BaseModel):
    """Time-aligned actions, visual features and optional flow points of one demonstration"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    actions: np.ndarray                        # (T, d_q)
    features: np.ndarray                       # (T, d_f)
    initial_joints: np.ndarray                 # (d_q,)
    flow_points: Optional[np.ndarray] = None   # (T, 256, 2)
    goal_feature: Optional[np.ndarray] = None  # (d_g,)
    augmented: bool = False

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def d_q(self) -> int:
        return int(self.actions.shape[1])

    @property
    def d_f(self) -> int:
        return int(self.features.shape[1])

    @property
    def d_g(self) -> int:
        return 0 if self.goal_feature is None else int(self.goal_feature.shape[0])


class Dataset(BaseModel):
    """Collection of demonstrations sharing dimensions"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    demos: List[Demonstration]
    d_q: int
    d_f: int
    d_g: int = 0
    rescale_factor: Optional[float] = None

    @property
    def has_goal(self) -> bool:
        return self.d_g > 0

    @property
    def d_xi(self) -> int:
        return self.d_q + self.d_f + self.d_g

    @property
    def is_augmented(self) -> bool:
        return bool(self.demos) and all(demo.augmented for demo in self.demos)

    def __len__(self) -> int:
        return len(self.demos)
