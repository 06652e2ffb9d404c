# synthbench/perturbations.py - Goal jumps and observation blackouts
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from synthbench.toy_env import Observation, ToyEnv

MAX_GOAL_SAMPLES = 1000


class GoalPerturbation(BaseModel):
    """At `step` the goal jumps to a point at least `radius` away from the original"""
    step: int = Field(ge=0)
    radius: float = Field(ge=0)
    low: float = 0.1
    high: float = 0.9

    @property
    def is_noop(self) -> bool:
        return self.radius == 0.0

    def sample_goal(self, original: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        for _ in range(MAX_GOAL_SAMPLES):
            candidate = rng.uniform(self.low, self.high, 2)
            if np.linalg.norm(candidate - original) >= self.radius:
                return candidate
        # fall back to the farthest corner of the sampling box
        corners = np.array([[x, y] for x in (self.low, self.high) for y in (self.low, self.high)])
        return corners[np.argmax(np.linalg.norm(corners - original, axis=1))]

    def apply(self, env: ToyEnv, step: int, rng: np.random.Generator) -> bool:
        """Move the env goal when `step` is the perturbation step; returns True when it did"""
        if self.is_noop or step != self.step:
            return False
        env.goal = self.sample_goal(env.goal, rng)
        return True


def perturb(step: int, radius: float) -> Optional[GoalPerturbation]:
    """Goal-jump schedule; a zero radius is the identity schedule"""
    return None if radius == 0.0 else GoalPerturbation(step=step, radius=radius)


class OcclusionSchedule(BaseModel):
    """Inclusive step interval [start, stop] whose observations are blacked out"""
    start: int = 0
    stop: int = -1

    @property
    def is_empty(self) -> bool:
        return self.stop < self.start

    def covers(self, step: int) -> bool:
        return self.start <= step <= self.stop

    def filter(self, step: int, observation: Observation) -> Observation:
        if self.covers(step):
            return Observation.blackout(observation.features.shape[0])
        return observation

    @property
    def length(self) -> int:
        return 0 if self.is_empty else self.stop - self.start + 1


def occlude(start: int, stop: int) -> OcclusionSchedule:
    return OcclusionSchedule(start=start, stop=stop)


def occlusion_for_fraction(horizon: int, fraction: float, start: Optional[int] = None) -> OcclusionSchedule:
    """Blackout covering `fraction` of the episode steps, starting a quarter of the way in"""
    count = int(round(fraction * horizon))
    if count == 0:
        return OcclusionSchedule()
    start = horizon // 4 if start is None else start
    return OcclusionSchedule(start=start, stop=start + count - 1)


OCCLUSION_LEVELS: Tuple[float, ...] = (0.0, 0.10, 0.25, 0.50)
