# workflows/benchmark_workflow.py - Prediction-quality, reactivity, occlusion and inference-cost reports
import csv
import json
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np
from loguru import logger

from models.koopman_models import KoopmanModel
from models.planning_models import ExecutionMode, MonitorMetric, TriggerPolicy
from synthbench.metrics import cosine_curve, dominance_fraction, split_rmse_curves
from synthbench.perturbations import OCCLUSION_LEVELS, GoalPerturbation
from synthbench.timing import kubm_query, timing_probe
from tools.lifting import latent_of
from tools.trajectory_tools import build_state
from workflows.episode_workflow import EpisodeWorkflow, success_rate, suite_summary

NOISE_LEVELS = (0.0, 0.002, 0.05, 0.08)


class BenchmarkWorkflow:
    """Synthetic-benchmark reports for one trained model"""

    def __init__(self, model: KoopmanModel, env_kind: str = "linear-coupled",
                 success_radius: float = 0.05, goal_conditioned: bool = False,
                 policy: Optional[TriggerPolicy] = None,
                 metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                 horizon: Optional[int] = None, bins: int = 100):
        self.workflow_name = "Synthetic Benchmark"
        self.model = model
        self.bins = bins
        self.episodes = EpisodeWorkflow(model, env_kind, success_radius, goal_conditioned,
                                        policy, metric, horizon)

    def prediction_quality(self, episodes_per_level: int = 10, seed: int = 0,
                           noise_levels: Sequence[float] = NOISE_LEVELS) -> Dict:
        """
        Open-loop rollouts with executor noise; RMSE curves split by outcome

        Args:
            episodes_per_level: episodes per noise level
            seed: master seed (each level gets its own spawned seed)
            noise_levels: executor noise std values mixed into the suite

        Returns:
            Dict with success/failed RMSE curves, the cosine curve and the dominance fraction
        """
        try:
            results = []
            for level, child in zip(noise_levels, np.random.SeedSequence(seed).spawn(len(noise_levels))):
                level_seed = int(child.generate_state(1)[0])
                results += self.episodes.run_suite(episodes_per_level, level_seed,
                                                   ExecutionMode.OPEN_LOOP, action_noise=level)

            predicted = [r.trace.predicted_flows for r in results]
            truth = [r.trace.true_flows for r in results]
            curves = split_rmse_curves(predicted, truth, [r.success for r in results], self.bins)
            cosine = cosine_curve([r.trace.predicted_features for r in results],
                                  [r.trace.observed_features for r in results], self.bins)
            dominance = None
            if curves["success"] is not None and curves["failed"] is not None:
                dominance = dominance_fraction(curves["failed"], curves["success"])
            logger.info(f"Prediction quality: {len(results)} rollouts, success rate {success_rate(results):.2f}, "
                        f"failed-over-success dominance {dominance}")
            return {
                "success": True,
                "rollouts": len(results),
                "success_rate": success_rate(results),
                "rmse_success": curves["success"],
                "rmse_failed": curves["failed"],
                "cosine": cosine,
                "dominance": dominance,
            }
        except Exception as e:
            logger.error(f"Error in prediction-quality suite: {str(e)}")
            return {"success": False, "error": str(e), "report": "prediction_quality"}

    def reactivity(self, episodes: int = 30, seed: int = 0, perturb_step: int = 20,
                   perturb_radius: float = 0.5) -> Dict:
        """Goal-jump suite executed open-loop and monitored on identical tasks"""
        try:
            perturbation = GoalPerturbation(step=perturb_step, radius=perturb_radius)
            logger.info(f"Step 1: open-loop goal-jump suite ({episodes} episodes, jump at {perturb_step})")
            open_loop = self.episodes.run_suite(episodes, seed, ExecutionMode.OPEN_LOOP,
                                                perturbation=perturbation)
            logger.info("Step 2: monitored goal-jump suite on the same tasks")
            monitored = self.episodes.run_suite(episodes, seed, ExecutionMode.MONITORED,
                                                perturbation=perturbation)
            monitored_summary = suite_summary(monitored, perturbation)
            window = self.episodes.policy.persistence + 2
            in_time = sum(1 for d in monitored_summary["trigger_delays"] if d is not None and d <= window)
            logger.info(f"🔁 Reactivity: {in_time}/{episodes} triggers within {window} steps")
            return {
                "success": True,
                "threshold": self.episodes.policy.threshold,
                "triggered_in_time": in_time,
                "trigger_window": window,
                "open_loop": suite_summary(open_loop, perturbation),
                "monitored": monitored_summary,
            }
        except Exception as e:
            logger.error(f"Error in reactivity suite: {str(e)}")
            return {"success": False, "error": str(e), "report": "reactivity"}

    def occlusion_robustness(self, episodes: int = 30, seed: int = 0,
                             mode: ExecutionMode = ExecutionMode.OPEN_LOOP,
                             levels: Sequence[float] = OCCLUSION_LEVELS) -> Dict:
        """
        One seeded suite under each blackout level

        Returns:
            Dict with per-level success rates and whether every episode's action
            stream matches the unoccluded run exactly
        """
        try:
            sweep = self.episodes.occlusion_sweep(episodes, seed, mode, levels)
            reference = sweep[levels[0]]
            report = {}
            for level, results in sweep.items():
                identical = all(np.array_equal(a.action_stream, b.action_stream)
                                for a, b in zip(reference, results))
                report[f"{level:g}"] = {"success_rate": success_rate(results), "identical_actions": identical}
            streams_identical = all(entry["identical_actions"] for entry in report.values())
            logger.info(f"🙈 Occlusion sweep ({mode.value}): identical action streams={streams_identical}")
            return {"success": True, "mode": mode.value, "levels": report, "streams_identical": streams_identical}
        except Exception as e:
            logger.error(f"Error in occlusion sweep: {str(e)}")
            return {"success": False, "error": str(e), "report": "occlusion"}

    def timing(self, episodes: int = 10, steps_per_episode: int = 50, seed: int = 0) -> Dict:
        env = self.episodes.make_env()
        env.reset(*env.sample_task(np.random.default_rng(seed)))
        observation = env.observe()
        goal = observation.goal if self.model.has_goal else None
        z0 = latent_of(self.model, build_state(env.home, observation.features, self.model.rescale_factor, goal))
        holder = {}

        def reset():
            holder["query"] = kubm_query(self.model, z0)

        reset()
        stats = timing_probe(lambda: holder["query"](), episodes, steps_per_episode, reset=reset)
        logger.info(f"⏱️ Per-step query {stats['mean_ms']:.4f} ± {stats['std_ms']:.4f} ms")
        return stats


def write_curves(report: Dict, output_dir: Union[str, Path]) -> Path:
    """metrics/curves.csv with one row per percentile bin"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "curves.csv"
    columns = [key for key in ("rmse_success", "rmse_failed", "cosine") if report.get(key) is not None]
    bins = len(report[columns[0]]) if columns else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["percentile"] + columns)
        for b in range(bins):
            percentile = 100.0 * b / max(bins - 1, 1)
            writer.writerow([repr(percentile)] + [repr(float(report[c][b])) for c in columns])
    return path


def write_summary(summary: Dict, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def plain(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.floating, np.integer)):
            return value.item()
        return value

    path.write_text(json.dumps(summary, indent=2, default=plain), encoding="utf-8")
    return path
