# agents/implicit_planner.py
from typing import Optional, Union

import numpy as np
from loguru import logger

from models.koopman_models import KoopmanModel, LiftKind
from models.planning_models import Plan
from tools.lifting import SpectralEncoder, encoder_of, extract_action, latent_of
from tools.trajectory_tools import build_state
from utils.errors import ContractError


def rollout(model: Union[KoopmanModel, np.ndarray], z0: np.ndarray, horizon: int) -> np.ndarray:
    """z_0 = z0, z_{t+1} = K z_t; returns (horizon + 1, d_z)"""
    if horizon < 0:
        raise ContractError("rollout horizon must be >= 0")
    K = model.K if isinstance(model, KoopmanModel) else np.asarray(model, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (K.shape[0],):
        raise ContractError(f"initial latent has shape {z0.shape}, K expects ({K.shape[0]},)")
    latents = np.empty((horizon + 1, K.shape[0]))
    latents[0] = z0
    for t in range(horizon):
        latents[t + 1] = K @ latents[t]
    return latents


class ImplicitPlannerAgent:
    """Turns a trained model into action plans by open-loop latent rollout"""

    def __init__(self, model: KoopmanModel, default_horizon: Optional[int] = None):
        self.name = "Implicit Planner Agent"
        self.model = model
        self.encoder: Optional[SpectralEncoder] = encoder_of(model) if model.lift is LiftKind.MLP else None
        self.default_horizon = default_horizon

    def _horizon(self, horizon: Optional[int]) -> int:
        horizon = self.default_horizon if horizon is None else horizon
        if horizon is None:
            raise ContractError("no planning horizon given")
        return horizon

    def plan(self, a0: np.ndarray, feature0: np.ndarray, goal: Optional[np.ndarray] = None,
             horizon: Optional[int] = None, origin_step: int = 0) -> Plan:
        """
        Build a plan from an initial action/observation pair

        Args:
            a0: initial action (known initial configuration)
            feature0: observed visual feature, un-rescaled
            goal: goal feature for goal-conditioned models
            horizon: rollout length T_l
            origin_step: global step the plan starts at

        Returns:
            Plan whose features are reported in the original (un-rescaled) units
        """
        model = self.model
        dims = model.dims
        a0 = np.asarray(a0, dtype=np.float64)
        feature0 = np.asarray(feature0, dtype=np.float64)
        if a0.shape != (dims.d_q,):
            raise ContractError(f"initial action has shape {a0.shape}, model expects ({dims.d_q},)")
        if feature0.shape != (dims.d_f,):
            raise ContractError(f"feature has shape {feature0.shape}, model expects ({dims.d_f},)")
        if model.has_goal != (goal is not None):
            raise ContractError("goal must be given exactly when the model is goal-conditioned")
        if goal is not None and np.shape(goal) != (dims.d_g,):
            raise ContractError(f"goal has shape {np.shape(goal)}, model expects ({dims.d_g},)")

        c = model.rescale_factor
        xi0 = build_state(a0, feature0, c, goal)
        z0 = latent_of(model, xi0, self.encoder)
        latents = rollout(model, z0, self._horizon(horizon))
        return Plan(
            latents=latents,
            actions=extract_action(latents, dims.d_q).copy(),
            features=latents[:, model.feature_slice] / c,
            origin_step=origin_step,
        )

    def replan(self, step: int, last_action: np.ndarray, observed_feature: np.ndarray,
               goal: Optional[np.ndarray] = None, horizon: Optional[int] = None) -> Plan:
        """Treat (last commanded action, current observation) as a fresh initial condition"""
        new_plan = self.plan(last_action, observed_feature, goal, horizon, origin_step=step)
        logger.info(f"🔁 Replanned at step {step} over {new_plan.horizon} steps")
        return new_plan


def plan(model: KoopmanModel, a0: np.ndarray, feature0: np.ndarray, goal: Optional[np.ndarray],
         horizon: int) -> Plan:
    return ImplicitPlannerAgent(model).plan(a0, feature0, goal, horizon)
