# workflows/episode_workflow.py - Plan execution with monitoring, replanning, perturbation and occlusion
import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from agents.implicit_planner import ImplicitPlannerAgent
from agents.replan_monitor import CodecDecoder, FeatureDecoder, KeypointDecoder, ReplanMonitorAgent
from models.koopman_models import KoopmanModel
from models.planning_models import (
    EpisodeResult,
    EpisodeStep,
    EpisodeTrace,
    ExecutionMode,
    MonitorMetric,
    TriggerPolicy,
)
from synthbench.perturbations import OCCLUSION_LEVELS, GoalPerturbation, OcclusionSchedule, occlusion_for_fraction
from synthbench.toy_env import Observation, ToyEnv, flow_points_at
from tools.flow_codec import FlowCodec, decode_points, encode_flow, grid_from_points, optional_codec
from utils.errors import ContractError

EPISODE_CAP_FACTOR = 3


def observed_features(observation: Observation, codec: Optional[FlowCodec], d_f: int) -> np.ndarray:
    """Feature the model consumes: pose features, or codec latents of the flow points"""
    if observation.occluded:
        return np.zeros(d_f)
    if codec is None:
        return observation.features
    return encode_flow(grid_from_points(observation.flow_points), codec).reshape(-1)


def default_decoder(model: KoopmanModel) -> FeatureDecoder:
    codec = optional_codec(model.codec_weights)
    return KeypointDecoder() if codec is None else CodecDecoder(codec)


def predicted_flow_points(feature: np.ndarray, codec: Optional[FlowCodec]) -> np.ndarray:
    if codec is not None:
        return decode_points(feature, codec)
    return flow_points_at(np.asarray(feature)[:2])


def execute_episode(model: KoopmanModel, env: ToyEnv,
                    mode: ExecutionMode = ExecutionMode.OPEN_LOOP,
                    policy: Optional[TriggerPolicy] = None,
                    metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                    decoder: Optional[FeatureDecoder] = None,
                    occlusion: Optional[OcclusionSchedule] = None,
                    perturbation: Optional[GoalPerturbation] = None,
                    action_noise: float = 0.0,
                    rng: Optional[np.random.Generator] = None,
                    horizon: Optional[int] = None) -> EpisodeResult:
    """
    Run one episode from the env's current (already reset) state

    Args:
        model: trained model
        env: toy env, reset to the episode's task
        mode: open-loop ignores every observation after step 0; monitored
            compares predicted and observed features each step and replans on trigger
        policy: trigger policy (monitored mode)
        metric: monitoring metric
        decoder: feature decoder for the flow-centroid metric (model default when None)
        occlusion: steps whose observations are blacked out
        perturbation: goal jump schedule
        action_noise: std of Gaussian noise added by the executor (commanded actions are logged)
        rng: randomness for the perturbation and the executor noise
        horizon: task horizon T_H (env default when None)

    Returns:
        EpisodeResult with per-step logs and a trace for the prediction metrics
    """
    mode = ExecutionMode(mode)
    if mode is ExecutionMode.MONITORED and policy is None:
        raise ContractError("monitored execution needs a trigger policy")
    rng = rng if rng is not None else np.random.default_rng(0)
    horizon = horizon or env.horizon
    codec = optional_codec(model.codec_weights)
    d_f = model.dims.d_f

    planner = ImplicitPlannerAgent(model, default_horizon=horizon)
    monitor = None
    if mode is ExecutionMode.MONITORED:
        monitor = ReplanMonitorAgent(policy, metric, decoder or default_decoder(model))

    observation = env.observe()
    goal_input = observation.goal if model.has_goal else None
    active = planner.plan(env.home, observed_features(observation, codec, d_f), goal_input)

    logs: List[EpisodeStep] = []
    replan_steps: List[int] = []
    predicted, observed, predicted_flows, true_flows = [], [], [], []
    cap = EPISODE_CAP_FACTOR * horizon
    step = 0
    while step <= active.last_step and step < cap:
        if perturbation is not None and perturbation.apply(env, step, rng):
            observation = env.observe()
            logger.debug(f"Goal moved to {env.goal.round(3).tolist()} at step {step}")
        seen = occlusion.filter(step, observation) if occlusion is not None else observation
        index = active.index_of(step)
        commanded = active.actions[index].copy()
        predicted_feature = active.features[index]
        feature = observed_features(seen, codec, d_f)

        entry = EpisodeStep(step=step, action=commanded.tolist(), occluded=seen.occluded)
        if monitor is not None and not seen.occluded:
            record = monitor.observe(step, predicted_feature, feature)
            entry.predicted_feature_error = record.error
            entry.triggered = record.triggered
            if record.triggered:
                goal_input = seen.goal if model.has_goal else None
                active = planner.replan(step, commanded, feature, goal_input)
                monitor.mark_replanned()
                entry.replanned = True
                replan_steps.append(step)
        logs.append(entry)

        predicted.append(predicted_feature)
        observed.append(feature)
        predicted_flows.append(predicted_flow_points(predicted_feature, codec))
        true_flows.append(observation.flow_points)

        executed = commanded
        if action_noise > 0.0:
            executed = commanded + rng.normal(0.0, action_noise, commanded.shape)
        observation = env.step(executed)
        step += 1

    distance = env.object_goal_distance()
    trace = EpisodeTrace(
        predicted_features=np.asarray(predicted), observed_features=np.asarray(observed),
        predicted_flows=np.asarray(predicted_flows), true_flows=np.asarray(true_flows),
    )
    return EpisodeResult(
        success=distance < env.success_radius, steps=step, final_distance=distance,
        success_radius=env.success_radius, logs=logs, replan_steps=replan_steps,
        monitor_records=monitor.records if monitor is not None else [], trace=trace,
    )


def write_episode_csv(result: EpisodeResult, path: Union[str, Path]) -> Path:
    """Columns: step, action_0..action_{d-1}, predicted_feature_error, triggered, replanned"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d_q = len(result.logs[0].action) if result.logs else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step"] + [f"action_{i}" for i in range(d_q)]
                        + ["predicted_feature_error", "triggered", "replanned"])
        for entry in result.logs:
            error = "" if entry.predicted_feature_error is None else repr(entry.predicted_feature_error)
            writer.writerow([entry.step] + [repr(a) for a in entry.action]
                            + [error, int(entry.triggered), int(entry.replanned)])
    return path


class EpisodeWorkflow:
    """Runs seeded suites of episodes against one trained model"""

    def __init__(self, model: KoopmanModel, env_kind: str = "linear-coupled",
                 success_radius: float = 0.05, goal_conditioned: bool = False,
                 policy: Optional[TriggerPolicy] = None,
                 metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                 horizon: Optional[int] = None):
        self.workflow_name = "Episode Execution"
        self.model = model
        self.env_kind = env_kind
        self.success_radius = success_radius
        self.goal_conditioned = goal_conditioned
        self.policy = policy or TriggerPolicy()
        self.metric = MonitorMetric(metric)
        self.horizon = horizon

    def make_env(self) -> ToyEnv:
        return ToyEnv(self.env_kind, success_radius=self.success_radius,
                      goal_conditioned=self.goal_conditioned)

    def run_suite(self, episodes: int, seed: int = 0,
                  mode: ExecutionMode = ExecutionMode.OPEN_LOOP,
                  perturbation: Optional[GoalPerturbation] = None,
                  occlusion: Optional[OcclusionSchedule] = None,
                  action_noise: float = 0.0) -> List[EpisodeResult]:
        """
        Run independent episodes whose seeds are spawned from one master seed

        Args:
            episodes: number of episodes
            seed: master seed; episode i always gets the same task for a given seed
            mode: open-loop or monitored
            perturbation: goal jump applied in every episode
            occlusion: blackout schedule applied in every episode
            action_noise: executor noise std

        Returns:
            List of EpisodeResult in episode order
        """
        results = []
        for child in np.random.SeedSequence(seed).spawn(episodes):
            task_rng, episode_rng = (np.random.default_rng(s) for s in child.spawn(2))
            env = self.make_env()
            obj, goal = env.sample_task(task_rng)
            env.reset(obj, goal)
            results.append(execute_episode(
                self.model, env, mode, self.policy, self.metric,
                occlusion=occlusion, perturbation=perturbation,
                action_noise=action_noise, rng=episode_rng, horizon=self.horizon,
            ))
        rate = success_rate(results)
        logger.info(f"🏁 {mode.value} suite: {episodes} episodes, success rate {rate:.2f}")
        return results

    def occlusion_sweep(self, episodes: int, seed: int = 0,
                        mode: ExecutionMode = ExecutionMode.OPEN_LOOP,
                        levels: Sequence[float] = OCCLUSION_LEVELS) -> Dict[float, List[EpisodeResult]]:
        """Same seeded suite under blackouts covering each fraction of the task horizon"""
        horizon = self.horizon or self.make_env().horizon
        sweep = {}
        for level in levels:
            schedule = occlusion_for_fraction(horizon, level)
            logger.info(f"Occlusion level {level:.0%}: steps {schedule.start}..{schedule.stop}")
            sweep[level] = self.run_suite(episodes, seed, mode, occlusion=schedule)
        return sweep


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else 0.0


def suite_summary(results: Sequence[EpisodeResult],
                  perturbation: Optional[GoalPerturbation] = None) -> Dict:
    """JSON-ready summary of a suite"""
    summary = {
        "episodes": len(results),
        "success_rate": success_rate(results),
        "mean_final_distance": float(np.mean([r.final_distance for r in results])) if results else 0.0,
        "replans": [len(r.replan_steps) for r in results],
    }
    if perturbation is not None:
        summary["trigger_delays"] = [
            (r.replan_steps[0] - perturbation.step) if r.replan_steps else None for r in results
        ]
    return summary
