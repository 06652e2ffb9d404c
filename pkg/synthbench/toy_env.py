# synthbench/toy_env.py - Coupled robot/object toy tasks with exact synthetic flow points
import math
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from utils.errors import ContractError

ENV_KINDS = ("linear-coupled", "reach-grasp-move", "pendulum-push")

PIXEL_OFFSET = 16.0
PIXEL_SCALE = 96.0
OBJECT_RADIUS = 0.04
FLOW_SIDE = 16

# linear-coupled
PUSH_GAIN = 0.5
EXPERT_GAIN = 0.3
ACTION_DAMPING = 0.5

# reach-grasp-move
GRASP_RADIUS = 0.03
REACH_TOLERANCE = 0.01
ARM_GAIN = 0.3
ARM_HOME = (0.5, 0.1, 0.0)

# pendulum-push
ANCHOR = (0.5, 0.5)
ARM_LENGTH = 0.3
CONTACT_RADIUS = 0.04
MAX_SWING = 0.1

DEFAULT_HORIZON = {"linear-coupled": 40, "reach-grasp-move": 50, "pendulum-push": 50}
ACTION_DIM = {"linear-coupled": 2, "reach-grasp-move": 3, "pendulum-push": 2}


def to_pixels(position: np.ndarray) -> np.ndarray:
    return PIXEL_OFFSET + PIXEL_SCALE * np.asarray(position, dtype=np.float64)


def _lattice_offsets() -> np.ndarray:
    """16x16 lattice inscribed in the object disc, row-major by track index"""
    radius_px = OBJECT_RADIUS * PIXEL_SCALE
    spacing = radius_px / (7.5 * math.sqrt(2.0))
    rows, cols = np.divmod(np.arange(FLOW_SIDE * FLOW_SIDE), FLOW_SIDE)
    return np.stack([(cols - 7.5) * spacing, (rows - 7.5) * spacing], axis=1)


LATTICE = _lattice_offsets()


def flow_points_at(position: np.ndarray) -> np.ndarray:
    """256 tracked points of the object disc centred at a workspace position (pixels)"""
    return to_pixels(position)[None, :] + LATTICE


class Observation(BaseModel):
    """What the robot sees at one step; blacked-out frames carry occluded=True"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    flow_points: Optional[np.ndarray] = None
    goal: Optional[np.ndarray] = None
    occluded: bool = False

    @classmethod
    def blackout(cls, d_f: int) -> "Observation":
        return cls(features=np.zeros(d_f), occluded=True)


class ToyEnv:
    """Deterministic coupled robot/object task

    Actions are executed exactly. Observation at step t is taken before the
    action of step t is applied, matching the frame layout of the datasets.
    """

    def __init__(self, kind: str = "linear-coupled", success_radius: float = 0.05,
                 goal_conditioned: bool = False):
        if kind not in ENV_KINDS:
            raise ContractError(f"unknown env kind '{kind}'")
        self.kind = kind
        self.success_radius = success_radius
        self.goal_conditioned = goal_conditioned
        self.d_q = ACTION_DIM[kind]
        self.horizon = DEFAULT_HORIZON[kind]
        self.joints = np.zeros(self.d_q)
        self.object = np.zeros(2)
        self.goal = np.zeros(2)
        self.attached = False
        self.grasp_offset = np.zeros(2)

    @property
    def d_f(self) -> int:
        return 2 if self.goal_conditioned else 4

    @property
    def home(self) -> np.ndarray:
        if self.kind == "reach-grasp-move":
            return np.asarray(ARM_HOME)
        if self.kind == "pendulum-push":
            return np.asarray(ANCHOR)
        return np.zeros(2)

    def reset(self, object_position: np.ndarray, goal: np.ndarray) -> Observation:
        self.joints = self.home.copy()
        self.object = np.asarray(object_position, dtype=np.float64).copy()
        self.goal = np.asarray(goal, dtype=np.float64).copy()
        self.attached = False
        self.grasp_offset = np.zeros(2)
        return self.observe()

    def sample_task(self, rng: np.random.Generator, min_distance: float = 0.2):
        """Random (object, goal) pair at least min_distance apart"""
        while True:
            if self.kind == "pendulum-push":
                theta = rng.uniform(0.0, 2.0 * math.pi)
                swing = rng.uniform(0.8, 1.6) * rng.choice([-1.0, 1.0])
                obj = self._on_arc(theta)
                goal = self._on_arc(theta + swing)
            else:
                obj = rng.uniform(0.2, 0.8, 2)
                goal = rng.uniform(0.2, 0.8, 2)
            if np.linalg.norm(obj - goal) >= min_distance:
                return obj, goal

    @staticmethod
    def _on_arc(theta: float) -> np.ndarray:
        return np.asarray(ANCHOR) + ARM_LENGTH * np.array([math.cos(theta), math.sin(theta)])

    def _angle_of(self, point: np.ndarray) -> float:
        rel = np.asarray(point) - np.asarray(ANCHOR)
        return math.atan2(rel[1], rel[0])

    def observe(self) -> Observation:
        if self.goal_conditioned:
            features = self.object.copy()
        else:
            features = np.concatenate([self.object, self.goal])
        return Observation(features=features, flow_points=flow_points_at(self.object),
                           goal=self.goal.copy() if self.goal_conditioned else None)

    def step(self, action: np.ndarray) -> Observation:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.d_q,):
            raise ContractError(f"action has shape {action.shape}, env expects ({self.d_q},)")

        if self.kind == "linear-coupled":
            self.object = self.object + PUSH_GAIN * action
        elif self.kind == "reach-grasp-move":
            ee = action[:2]
            gripping = action[2] > 0.5
            if self.attached and not gripping:
                self.attached = False
            elif not self.attached and gripping and np.linalg.norm(ee - self.object) < GRASP_RADIUS:
                self.attached = True
                self.grasp_offset = self.object - ee
            if self.attached:
                self.object = ee + self.grasp_offset
        else:
            if np.linalg.norm(action - self.object) < CONTACT_RADIUS:
                self.object = self._on_arc(self._angle_of(action))
        self.joints = action.copy()
        return self.observe()

    def expert_action(self, previous_action: np.ndarray) -> np.ndarray:
        """Scripted expert acting on the current state and its last command"""
        previous_action = np.asarray(previous_action, dtype=np.float64)
        if self.kind == "linear-coupled":
            return (1.0 - ACTION_DAMPING) * previous_action + EXPERT_GAIN * (self.goal - self.object)

        if self.kind == "reach-grasp-move":
            ee = previous_action[:2]
            if self.attached:
                return np.concatenate([ee + ARM_GAIN * (self.goal - self.object), [1.0]])
            to_object = self.object - ee
            if np.linalg.norm(to_object) < REACH_TOLERANCE:
                return np.concatenate([ee, [1.0]])
            return np.concatenate([ee + ARM_GAIN * to_object, [0.0]])

        pusher = previous_action
        if np.linalg.norm(pusher - self.object) > REACH_TOLERANCE * 2:
            return pusher + ARM_GAIN * (self.object - pusher)
        theta = self._angle_of(self.object)
        error = math.atan2(math.sin(self._angle_of(self.goal) - theta), math.cos(self._angle_of(self.goal) - theta))
        swing = float(np.clip(ARM_GAIN * error, -MAX_SWING, MAX_SWING))
        return self._on_arc(theta + swing)

    def object_goal_distance(self) -> float:
        return float(np.linalg.norm(self.object - self.goal))

    def is_success(self) -> bool:
        return self.object_goal_distance() < self.success_radius
