# agents/replan_monitor.py
from typing import List, Optional, Protocol, Sequence, Union

import numpy as np
from loguru import logger

from agents.implicit_planner import ImplicitPlannerAgent
from models.koopman_models import KoopmanModel
from models.planning_models import MonitorMetric, MonitorRecord, TriggerPolicy, TriggerRule
from models.trajectory_models import Dataset
from tools.flow_codec import FlowCodec, decode_points, flow_centroid
from utils.errors import ContractError, DegenerateMetricError

PIXEL_OFFSET = 16.0
PIXEL_SCALE = 96.0


class FeatureDecoder(Protocol):
    def decode(self, feature: np.ndarray) -> np.ndarray:
        """Feature vector -> (N, 2) pixel points"""


class KeypointDecoder:
    """Reads pose features as 2-D keypoints in workspace units and maps them to pixels"""

    def __init__(self, scale: float = PIXEL_SCALE, offset: float = PIXEL_OFFSET):
        self.scale = scale
        self.offset = offset

    def decode(self, feature: np.ndarray) -> np.ndarray:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.size % 2:
            raise ContractError("keypoint features need an even length")
        return feature.reshape(-1, 2) * self.scale + self.offset


class CodecDecoder:
    """Decodes 128-dim flow latents back to 256 points through the codec"""

    def __init__(self, codec: FlowCodec):
        self.codec = codec

    def decode(self, feature: np.ndarray) -> np.ndarray:
        return decode_points(feature, self.codec)


def monitor_step(predicted: np.ndarray, observed: np.ndarray,
                 metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                 decoder: Optional[FeatureDecoder] = None) -> float:
    """Divergence between a predicted and an observed feature (pixels or 1 - cosine)"""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.shape != observed.shape:
        raise ContractError(f"feature shapes differ: {predicted.shape} vs {observed.shape}")
    metric = MonitorMetric(metric)

    if metric is MonitorMetric.COSINE:
        norms = np.linalg.norm(predicted) * np.linalg.norm(observed)
        if norms == 0.0:
            raise DegenerateMetricError("cosine metric on a zero-norm feature")
        return max(0.0, 1.0 - float(np.dot(predicted, observed)) / norms)

    if decoder is None:
        raise ContractError("flow-centroid metric needs a feature decoder")
    predicted_centroid = flow_centroid(decoder.decode(predicted))
    observed_centroid = flow_centroid(decoder.decode(observed))
    return float(np.linalg.norm(predicted_centroid - observed_centroid))


def check_trigger(history: Sequence[Union[MonitorRecord, float]], policy: TriggerPolicy) -> bool:
    """Absolute rule: the last m errors all exceed tau. Jump rule: e_t - median(previous w) > tau"""
    errors = [h.error if isinstance(h, MonitorRecord) else float(h) for h in history]
    if policy.rule is TriggerRule.JUMP:
        if len(errors) < 2:
            return False
        previous = errors[-1 - policy.jump_window:-1]
        return errors[-1] - float(np.median(previous)) > policy.threshold
    if len(errors) < policy.persistence:
        return False
    return all(e > policy.threshold for e in errors[-policy.persistence:])


def nominal_errors(model: KoopmanModel, dataset: Dataset,
                   metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                   decoder: Optional[FeatureDecoder] = None) -> np.ndarray:
    """Monitoring errors of open-loop plans replayed against held-out demonstrations"""
    planner = ImplicitPlannerAgent(model)
    errors: List[float] = []
    for demo in dataset.demos:
        plan = planner.plan(demo.actions[0], demo.features[0], demo.goal_feature, demo.length - 1)
        for t in range(demo.length):
            errors.append(monitor_step(plan.features[t], demo.features[t], metric, decoder))
    return np.asarray(errors)


def calibrate_threshold(model: KoopmanModel, dataset: Dataset,
                        metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                        decoder: Optional[FeatureDecoder] = None,
                        minimum: float = 1e-3, factor: float = 5.0, quantile: float = 95.0) -> float:
    """tau = max(minimum, factor * quantile-th percentile of nominal error)"""
    errors = nominal_errors(model, dataset, metric, decoder)
    if errors.size == 0:
        raise ContractError("no frames to calibrate the trigger threshold on")
    tau = max(minimum, factor * float(np.percentile(errors, quantile)))
    logger.info(f"Calibrated trigger threshold tau={tau:.6g} ({metric.value}, {errors.size} frames)")
    return tau


class ReplanMonitorAgent:
    """Keeps the per-step monitor records of one episode and decides when to replan"""

    def __init__(self, policy: TriggerPolicy, metric: MonitorMetric = MonitorMetric.FLOW_CENTROID,
                 decoder: Optional[FeatureDecoder] = None):
        self.name = "Replan Monitor Agent"
        self.policy = policy
        self.metric = MonitorMetric(metric)
        self.decoder = decoder
        self.records: List[MonitorRecord] = []
        self._window_start = 0

    def reset(self):
        self.records = []
        self._window_start = 0

    def mark_replanned(self):
        """Later trigger decisions only look at errors measured against the new plan"""
        self._window_start = len(self.records)

    def observe(self, step: int, predicted: np.ndarray, observed: np.ndarray) -> MonitorRecord:
        error = monitor_step(predicted, observed, self.metric, self.decoder)
        errors = [r.error for r in self.records[self._window_start:]] + [error]
        triggered = check_trigger(errors, self.policy)
        record = MonitorRecord(step=step, error=error, triggered=triggered)
        self.records.append(record)
        if triggered:
            logger.info(f"⚠️ Replan trigger at step {step}: error={error:.4g} > tau={self.policy.threshold:.4g}")
        else:
            logger.debug(f"Monitor step {step}: error={error:.4g}")
        return record
