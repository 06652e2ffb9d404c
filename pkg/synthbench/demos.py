# synthbench/demos.py - Scripted expert demonstrations in the dataset format
from typing import Optional

import numpy as np
from loguru import logger

from models.trajectory_models import Dataset, Demonstration
from synthbench.toy_env import ToyEnv
from utils.errors import ContractError, ExpertFailureError

MAX_RETRIES = 20


def expert_demonstration(env: ToyEnv, object_position: np.ndarray, goal: np.ndarray,
                         horizon: Optional[int] = None, include_flow: bool = True) -> Demonstration:
    """Roll the scripted expert; frame t pairs the observation before action t with action t"""
    horizon = horizon or env.horizon
    observation = env.reset(object_position, goal)
    previous = env.home.copy()
    actions, features, flows = [], [], []
    for _ in range(horizon):
        action = env.expert_action(previous)
        actions.append(action)
        features.append(observation.features)
        flows.append(observation.flow_points)
        observation = env.step(action)
        previous = action
    return Demonstration(
        actions=np.asarray(actions),
        features=np.asarray(features),
        initial_joints=env.home.copy(),
        flow_points=np.asarray(flows) if include_flow else None,
        goal_feature=env.goal.copy() if env.goal_conditioned else None,
    )


def generate_demos(kind: str, num_demos: int, seed: int = 0, goal_conditioned: bool = False,
                   success_radius: float = 0.05, horizon: Optional[int] = None,
                   include_flow: bool = True, max_retries: int = MAX_RETRIES) -> Dataset:
    """
    Generate successful expert demonstrations with randomized object poses and goals

    Args:
        kind: toy env kind
        num_demos: number of demonstrations N
        seed: master seed; the same seed yields the same dataset
        goal_conditioned: carry the goal as a separate `goal` field instead of a feature
        success_radius: success criterion used to accept a demonstration
        horizon: steps per demonstration (env default when None)
        include_flow: attach the 256 synthetic flow points per frame
        max_retries: resampling budget per demonstration

    Returns:
        Dataset in the raw (un-augmented) form
    """
    if num_demos < 1:
        raise ContractError("num_demos must be >= 1")
    rng = np.random.default_rng(seed)
    env = ToyEnv(kind, success_radius=success_radius, goal_conditioned=goal_conditioned)
    demos = []
    for index in range(num_demos):
        for attempt in range(max_retries):
            obj, goal = env.sample_task(rng)
            demo = expert_demonstration(env, obj, goal, horizon, include_flow)
            if env.is_success():
                demos.append(demo)
                break
            logger.debug(f"Expert missed demo {index} attempt {attempt} "
                         f"(distance {env.object_goal_distance():.4f}); resampling")
        else:
            raise ExpertFailureError(f"expert failed {max_retries} sampled configurations for demo {index}")

    first = demos[0]
    logger.info(f"🧪 Generated {num_demos} {kind} demonstrations (T={first.length}, seed={seed})")
    return Dataset(demos=demos, d_q=first.d_q, d_f=first.d_f, d_g=first.d_g)
