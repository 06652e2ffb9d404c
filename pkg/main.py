# main.py - Command-line entry point for Koopman behavioral models
import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from agents.flow_ae_trainer import FlowAETrainerAgent
from agents.implicit_planner import ImplicitPlannerAgent
from agents.koopman_trainer import KoopmanTrainerAgent, fit_model_edmd
from agents.replan_monitor import calibrate_threshold
from config.run_config import RunConfig, build_config, dump_effective, merge_overrides, parse_config_text
from config.settings import settings
from models.koopman_models import KoopmanModel, LiftKind
from models.planning_models import ExecutionMode, MonitorMetric, TriggerPolicy
from synthbench.demos import generate_demos
from synthbench.perturbations import GoalPerturbation, OcclusionSchedule
from tools.flow_codec import decode_points, encode_dataset, optional_codec, pooled_grids, reconstruction_rmse
from tools.model_store import MODEL_EXTENSION, load_codec, load_model, save_codec, save_model
from tools.trajectory_tools import load_dataset, prepare_dataset, save_dataset
from utils.errors import ConfigError
from utils.logging import setup_logging
from workflows.ablation_workflow import AblationWorkflow
from workflows.benchmark_workflow import BenchmarkWorkflow, write_curves, write_summary
from workflows.episode_workflow import EpisodeWorkflow, default_decoder, suite_summary, write_episode_csv

VERSION = "0.1.0"
SUITES = ("episodes", "reactivity", "occlusion")


class UsageError(Exception):
    """Bad flag values that argparse itself cannot detect"""


def _parse_interval(text: str, separator: str = ":") -> List[str]:
    parts = text.split(separator)
    if len(parts) != 2:
        raise UsageError(f"expected two values separated by '{separator}', got '{text}'")
    return parts


class BehavioralModelSystem:
    """
    Wires data, training, planning and benchmarking behind one interface

    Every command returns a JSON-ready dict; `success` is always present.
    """

    def __init__(self, config: RunConfig, output_dir: Path):
        self.config = config
        self.output_dir = output_dir

    # Data

    def inspect_dataset(self, dataset_path: str) -> Dict:
        dataset = load_dataset(dataset_path)
        prepared = prepare_dataset(dataset)
        return {
            "success": True,
            "demos": len(dataset),
            "d_q": dataset.d_q,
            "d_f": dataset.d_f,
            "d_g": dataset.d_g,
            "lengths": [demo.length for demo in dataset.demos],
            "has_flow": all(demo.flow_points is not None for demo in dataset.demos),
            "rescale_factor": prepared.rescale_factor,
        }

    def generate(self, out_path: str, include_flow: bool) -> Dict:
        config = self.config
        dataset = generate_demos(config.env_kind, config.num_demos, config.seed,
                                 goal_conditioned=config.goal_conditioned,
                                 success_radius=config.success_radius,
                                 horizon=config.episode_horizon or None, include_flow=include_flow)
        save_dataset(dataset, out_path)
        return {"success": True, "dataset": out_path, "demos": len(dataset), "env_kind": config.env_kind}

    # Training

    def _prepared(self, dataset_path: str, codec_path: Optional[str]):
        dataset = load_dataset(dataset_path)
        codec = None
        if codec_path:
            codec = load_codec(codec_path)
            dataset = encode_dataset(dataset, codec)
        return prepare_dataset(dataset), codec

    def train(self, dataset_path: str, out_path: str, codec_path: Optional[str] = None) -> Dict:
        dataset, codec = self._prepared(dataset_path, codec_path)
        model = KoopmanTrainerAgent(self.config.train_config()).train(dataset)
        if codec is not None:
            model.codec_weights = codec.weights()
        save_model(model, out_path)
        return {
            "success": True,
            "model": out_path,
            "lift": model.lift.value,
            "d_z": model.dims.d_z,
            "initial_loss": model.history.losses[0],
            "final_loss": model.history.losses[-1],
            "final_spectral_radius": model.history.spectral_radii[-1],
        }

    def edmd(self, dataset_path: str, out_path: str, codec_path: Optional[str] = None) -> Dict:
        dataset, codec = self._prepared(dataset_path, codec_path)
        model = fit_model_edmd(dataset, self.config.lift, self.config.ridge)
        if codec is not None:
            model.codec_weights = codec.weights()
        save_model(model, out_path)
        return {
            "success": True,
            "model": out_path,
            "lift": model.lift.value,
            "d_z": model.dims.d_z,
            "one_step_loss": model.history.losses[0],
            "spectral_radius": model.history.spectral_radii[0],
        }

    def ablate(self, dataset_path: str) -> Dict:
        dataset, _ = self._prepared(dataset_path, None)
        result = AblationWorkflow(self.config.train_config()).run(dataset, self.output_dir / "metrics")
        if not result["success"]:
            return {"success": False, "error": result["error"]}
        return {"success": True, "summary": result["summary"], "best": result["best"]}

    # Planning and execution

    def plan(self, model_path: str, init: Dict, horizon: int, out_path: str) -> Dict:
        model = load_model(model_path)
        planner = ImplicitPlannerAgent(model)
        goal = None if init.get("goal") is None else np.asarray(init["goal"], dtype=np.float64)
        plan = planner.plan(np.asarray(init["action"], dtype=np.float64),
                            np.asarray(init["feature"], dtype=np.float64), goal, horizon)
        document = {
            "origin_step": plan.origin_step,
            "horizon": plan.horizon,
            "actions": plan.actions.tolist(),
            "features": plan.features.tolist(),
        }
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(document), encoding="utf-8")
        return {"success": True, "plan": out_path, "horizon": plan.horizon}

    def _policy(self, model: KoopmanModel, calibrate_on: Optional[str]) -> TriggerPolicy:
        """Configured trigger policy; tau is recalibrated on held-out demos when a dataset is given"""
        policy = self.config.trigger_policy()
        if not calibrate_on:
            return policy
        dataset = load_dataset(calibrate_on)
        codec = optional_codec(model.codec_weights)
        if codec is not None:
            dataset = encode_dataset(dataset, codec)
        tau = calibrate_threshold(model, dataset, self.config.monitor_metric, default_decoder(model))
        return policy.model_copy(update={"threshold": tau})

    def _episodes(self, model: KoopmanModel, policy: TriggerPolicy) -> EpisodeWorkflow:
        config = self.config
        return EpisodeWorkflow(model, config.env_kind, config.success_radius, config.goal_conditioned,
                               policy, config.monitor_metric,
                               config.plan_horizon or config.episode_horizon or None)

    def _bench(self, model: KoopmanModel, policy: TriggerPolicy) -> BenchmarkWorkflow:
        config = self.config
        return BenchmarkWorkflow(model, config.env_kind, config.success_radius, config.goal_conditioned,
                                 policy, config.monitor_metric,
                                 config.plan_horizon or config.episode_horizon or None,
                                 config.percentile_bins)

    def run(self, model_path: str, mode: ExecutionMode, perturbation: Optional[GoalPerturbation],
            occlusion: Optional[OcclusionSchedule], calibrate_on: Optional[str] = None) -> Dict:
        config = self.config
        model = load_model(model_path)
        policy = self._policy(model, calibrate_on)
        results = self._episodes(model, policy).run_suite(config.episodes, config.seed, mode, perturbation,
                                                          occlusion, config.action_noise)
        episode_dir = self.output_dir / "episodes"
        for index, result in enumerate(results):
            write_episode_csv(result, episode_dir / f"episode_{index:03d}.csv")
        summary = suite_summary(results, perturbation)
        summary["mode"] = mode.value
        summary["trigger_threshold"] = policy.threshold
        write_summary(summary, self.output_dir / "run_summary.json")
        return {"success": True, **summary}

    def reactivity(self, model_path: str, calibrate_on: Optional[str] = None) -> Dict:
        config = self.config
        model = load_model(model_path)
        report = self._bench(model, self._policy(model, calibrate_on)).reactivity(
            config.episodes, config.seed, config.perturb_step, config.perturb_radius)
        if report["success"]:
            write_summary(report, self.output_dir / "metrics" / "reactivity.json")
        return report

    def occlusion(self, model_path: str, mode: ExecutionMode, calibrate_on: Optional[str] = None) -> Dict:
        config = self.config
        model = load_model(model_path)
        report = self._bench(model, self._policy(model, calibrate_on)).occlusion_robustness(
            config.episodes, config.seed, mode)
        if report["success"]:
            write_summary(report, self.output_dir / "metrics" / "occlusion.json")
        return report

    def metrics(self, model_path: str, calibrate_on: Optional[str] = None) -> Dict:
        config = self.config
        model = load_model(model_path)
        bench = self._bench(model, self._policy(model, calibrate_on))
        quality = bench.prediction_quality(config.episodes, config.seed)
        if not quality["success"]:
            return quality
        timing = bench.timing(seed=config.seed)
        metrics_dir = self.output_dir / "metrics"
        write_curves(quality, metrics_dir)
        summary = {
            "rollouts": quality["rollouts"],
            "success_rate": quality["success_rate"],
            "dominance": quality["dominance"],
            "timing": timing,
        }
        write_summary(summary, metrics_dir / "summary.json")
        return {"success": True, **summary}

    # Flow codec

    def flow_ae_train(self, dataset_path: str, out_path: str) -> Dict:
        config = self.config
        dataset = load_dataset(dataset_path)
        grids = pooled_grids(dataset)
        agent = FlowAETrainerAgent(config.flow_lr, config.flow_epochs, config.flow_lr_decay,
                                   config.flow_batch_size, config.seed)
        codec = agent.train(grids)
        save_codec(codec, out_path)
        frames = np.concatenate([d.flow_points for d in dataset.demos], axis=0)
        return {"success": True, "codec": out_path, "frames": int(grids.shape[0]),
                "final_loss": agent.losses[-1], "rmse_px": reconstruction_rmse(codec, frames)}

    def flow_ae_encode(self, codec_path: str, dataset_path: str, out_path: str) -> Dict:
        encoded = encode_dataset(load_dataset(dataset_path), load_codec(codec_path))
        save_dataset(encoded, out_path)
        return {"success": True, "dataset": out_path, "d_f": encoded.d_f}

    def flow_ae_decode(self, codec_path: str, latents_path: str, out_path: str) -> Dict:
        codec = load_codec(codec_path)
        latents = json.loads(Path(latents_path).read_text(encoding="utf-8"))
        points = [decode_points(np.asarray(latent, dtype=np.float64), codec).tolist() for latent in latents]
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(points), encoding="utf-8")
        return {"success": True, "points": out_path, "frames": len(points)}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="master seed for all randomness")
    common.add_argument("--log-level", default=None, help="console log level")
    common.add_argument("--out-dir", help="directory for reports and config.effective")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--lift", choices=[k.value for k in LiftKind])
    training.add_argument("--epochs", type=int)
    training.add_argument("--horizon", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--encoder-lr", type=float)
    training.add_argument("--koopman-lr", type=float)
    training.add_argument("--lift-dim", type=int)
    training.add_argument("--ridge", type=float)

    bench_env = argparse.ArgumentParser(add_help=False)
    bench_env.add_argument("--env", dest="env_kind")
    bench_env.add_argument("--episodes", type=int)
    bench_env.add_argument("--action-noise", type=float)

    parser = argparse.ArgumentParser(prog="kubm", description="Koopman behavioral models: learn, plan, replan")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("version", parents=[common], help="print the version")

    data = sub.add_parser("data", parents=[common], help="inspect and validate a dataset")
    data.add_argument("--dataset", required=True)

    train = sub.add_parser("train", parents=[common, training], help="co-train encoder and Koopman matrix")
    train.add_argument("--dataset", required=True)
    train.add_argument("--out", default=f"model{MODEL_EXTENSION}")
    train.add_argument("--flow-codec", help="codec file; features become codec latents of the flow points")

    edmd = sub.add_parser("edmd", parents=[common, training], help="closed-form fit for a hand-crafted lifting")
    edmd.add_argument("--dataset", required=True)
    edmd.add_argument("--out", default=f"model{MODEL_EXTENSION}")
    edmd.add_argument("--flow-codec")

    plan = sub.add_parser("plan", parents=[common], help="open-loop plan from an initial condition")
    plan.add_argument("--model", required=True)
    plan.add_argument("--init", required=True, help="JSON file or inline JSON with action, feature[, goal]")
    plan.add_argument("--horizon", type=int, required=True)
    plan.add_argument("--out", default="plan.json")

    run_parent = argparse.ArgumentParser(add_help=False, parents=[bench_env])
    run_parent.add_argument("--model", required=True)
    run_parent.add_argument("--mode", choices=[m.value for m in ExecutionMode], default="open-loop")
    run_parent.add_argument("--perturb", help="step:radius goal jump")
    run_parent.add_argument("--occlude", help="a:b blackout interval (inclusive)")
    run_parent.add_argument("--threshold", type=float, dest="trigger_threshold")
    run_parent.add_argument("--persistence", type=int, dest="trigger_persistence")
    run_parent.add_argument("--metric", choices=[m.value for m in MonitorMetric], dest="monitor_metric")
    run_parent.add_argument("--calibrate-on", help="held-out dataset; sets the trigger threshold from nominal error")
    run_parent.add_argument("--suite", choices=SUITES, default="episodes",
                            help="episodes, goal-jump reactivity report or occlusion sweep")
    sub.add_parser("run", parents=[common, run_parent], help="execute seeded episodes")

    ablate = sub.add_parser("ablate", parents=[common, training], help="four-way training-recipe ablation")
    ablate.add_argument("--dataset", required=True)

    metrics_parent = argparse.ArgumentParser(add_help=False, parents=[bench_env])
    metrics_parent.add_argument("--model", required=True)
    metrics_parent.add_argument("--calibrate-on", help="held-out dataset; sets the trigger threshold from nominal error")
    sub.add_parser("metrics", parents=[common, metrics_parent], help="prediction-quality curves and timing")

    bench = sub.add_parser("bench", help="synthetic benchmark")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    gen = bench_sub.add_parser("gen", parents=[common, bench_env], help="generate expert demonstrations")
    gen.add_argument("--num-demos", type=int)
    gen.add_argument("--goal-conditioned", action="store_true", default=None)
    gen.add_argument("--no-flow", action="store_true")
    gen.add_argument("--out", default="demos.jsonl")
    bench_sub.add_parser("run", parents=[common, run_parent], help="execute seeded episodes")
    bench_ablate = bench_sub.add_parser("ablate", parents=[common, training], help="training-recipe ablation")
    bench_ablate.add_argument("--dataset", required=True)
    bench_sub.add_parser("metrics", parents=[common, metrics_parent], help="prediction-quality curves")

    flow = sub.add_parser("flow-ae", help="flow-point autoencoder")
    flow_sub = flow.add_subparsers(dest="flow_command", required=True)
    flow_train = flow_sub.add_parser("train", parents=[common], help="train the codec")
    flow_train.add_argument("--dataset", required=True)
    flow_train.add_argument("--out", default=f"codec{MODEL_EXTENSION}")
    flow_train.add_argument("--epochs", type=int, dest="flow_epochs")
    flow_train.add_argument("--lr", type=float, dest="flow_lr")
    flow_encode = flow_sub.add_parser("encode", parents=[common], help="replace features by codec latents")
    flow_encode.add_argument("--codec", required=True)
    flow_encode.add_argument("--dataset", required=True)
    flow_encode.add_argument("--out", required=True)
    flow_decode = flow_sub.add_parser("decode", parents=[common], help="decode latents to flow points")
    flow_decode.add_argument("--codec", required=True)
    flow_decode.add_argument("--latents", required=True)
    flow_decode.add_argument("--out", required=True)
    return parser


CONFIG_FLAGS = (
    "seed", "lift", "epochs", "horizon", "batch_size", "encoder_lr", "koopman_lr", "lift_dim", "ridge",
    "env_kind", "episodes", "action_noise", "num_demos", "goal_conditioned", "trigger_threshold",
    "trigger_persistence", "monitor_metric", "flow_epochs", "flow_lr",
)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then flags"""
    config = RunConfig(seed=settings.SEED)
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from e
        config = build_config(parse_config_text(text, source=args.config), base=config)
    overrides = {key: getattr(args, key, None) for key in CONFIG_FLAGS}
    perturb = getattr(args, "perturb", None)
    if perturb:
        step, radius = _parse_interval(perturb)
        overrides["perturb_step"] = int(step)
        overrides["perturb_radius"] = float(radius)
    return merge_overrides(config, overrides)


def dispatch(system: BehavioralModelSystem, args: argparse.Namespace) -> Dict:
    command = args.command
    if command == "bench":
        command = {"gen": "gen", "run": "run", "ablate": "ablate", "metrics": "metrics"}[args.bench_command]
    config = system.config

    if command == "data":
        return system.inspect_dataset(args.dataset)
    if command == "gen":
        return system.generate(args.out, include_flow=not args.no_flow)
    if command == "train":
        return system.train(args.dataset, args.out, args.flow_codec)
    if command == "edmd":
        return system.edmd(args.dataset, args.out, args.flow_codec)
    if command == "ablate":
        return system.ablate(args.dataset)
    if command == "plan":
        init_text = args.init
        if Path(init_text).is_file():
            init_text = Path(init_text).read_text(encoding="utf-8")
        try:
            init = json.loads(init_text)
        except json.JSONDecodeError as e:
            raise UsageError(f"--init is neither a JSON file nor inline JSON: {e}") from e
        return system.plan(args.model, init, args.horizon, args.out)
    if command == "run":
        if args.suite == "reactivity":
            return system.reactivity(args.model, args.calibrate_on)
        if args.suite == "occlusion":
            return system.occlusion(args.model, ExecutionMode(args.mode), args.calibrate_on)
        perturbation = None
        if args.perturb:
            perturbation = GoalPerturbation(step=config.perturb_step, radius=config.perturb_radius)
        occlusion = None
        if args.occlude:
            start, stop = _parse_interval(args.occlude)
            occlusion = OcclusionSchedule(start=int(start), stop=int(stop))
        return system.run(args.model, ExecutionMode(args.mode), perturbation, occlusion, args.calibrate_on)
    if command == "metrics":
        return system.metrics(args.model, args.calibrate_on)
    if command == "flow-ae":
        if args.flow_command == "train":
            return system.flow_ae_train(args.dataset, args.out)
        if args.flow_command == "encode":
            return system.flow_ae_encode(args.codec, args.dataset, args.out)
        return system.flow_ae_decode(args.codec, args.latents, args.out)
    raise UsageError(f"unknown command '{command}'")


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; 0 on success, 2 on usage errors, 1 on runtime failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level or settings.LOG_LEVEL, settings.LOG_DIR)

    if args.command == "version":
        print(f"kubm {VERSION}")
        return 0

    try:
        config = resolve_config(args)
        output_dir = Path(args.out_dir or settings.OUTPUT_DIR)
        dump_effective(config, output_dir)
        result = dispatch(BehavioralModelSystem(config, output_dir), args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1

    if not result.get("success", False):
        logger.error(f"❌ {args.command} failed: {result.get('error')}")
        print(json.dumps({"error": "WorkflowError", "message": result.get("error")}), file=sys.stderr)
        return 1

    print(json.dumps(result, default=lambda v: v.tolist() if hasattr(v, "tolist") else str(v)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
