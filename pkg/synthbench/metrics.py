# synthbench/metrics.py - Prediction-quality curves over normalized trajectory percentiles
from typing import Dict, List, Optional, Sequence

import numpy as np

from utils.errors import ContractError, DegenerateMetricError


def percentile_bins(num_frames: int, bins: int) -> np.ndarray:
    """Nearest bin of every frame once time is normalized to [0, 100]"""
    if num_frames == 1:
        return np.zeros(1, dtype=int)
    percent = 100.0 * np.arange(num_frames) / (num_frames - 1)
    return np.rint(percent / 100.0 * (bins - 1)).astype(int)


def _binned(values: np.ndarray, bins: int) -> np.ndarray:
    """Per-bin mean of per-frame values; empty bins carry the previous bin forward"""
    assignment = percentile_bins(values.shape[0], bins)
    curve = np.full(bins, np.nan)
    for b in range(bins):
        members = values[assignment == b]
        if members.size:
            curve[b] = members.mean()
        elif b > 0:
            curve[b] = curve[b - 1]
    return curve


def rmse_by_percentile(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray],
                       bins: int = 100) -> np.ndarray:
    """
    RMSE of flow points per trajectory percentile, averaged across rollouts

    Args:
        predicted: per-rollout predicted points, each (T_i, N, 2)
        truth: per-rollout ground-truth points, same shapes
        bins: number of percentile bins

    Returns:
        Curve of length `bins`
    """
    if len(predicted) != len(truth) or not predicted:
        raise ContractError("need matching, non-empty lists of predicted and true flows")
    curves = []
    for pred, true in zip(predicted, truth):
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise ContractError(f"flow shapes differ: {pred.shape} vs {true.shape}")
        squared = np.sum((pred - true) ** 2, axis=-1).reshape(pred.shape[0], -1)
        # mean over points within a frame, then RMSE over the frames of a bin
        curves.append(np.sqrt(_binned(squared.mean(axis=1), bins)))
    return np.mean(curves, axis=0)


def split_rmse_curves(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray],
                      successes: Sequence[bool], bins: int = 100) -> Dict[str, Optional[np.ndarray]]:
    """Separate curves for successful and failed rollouts (None when a group is empty)"""
    curves: Dict[str, Optional[np.ndarray]] = {}
    for label, wanted in (("success", True), ("failed", False)):
        members = [i for i, ok in enumerate(successes) if bool(ok) == wanted]
        curves[label] = (rmse_by_percentile([predicted[i] for i in members],
                                            [truth[i] for i in members], bins)
                         if members else None)
    return curves


def cosine_curve(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray],
                 bins: int = 100) -> np.ndarray:
    """Per-percentile mean cosine similarity between predicted and true feature sequences"""
    if len(predicted) != len(truth) or not predicted:
        raise ContractError("need matching, non-empty lists of predicted and true features")
    curves: List[np.ndarray] = []
    for pred, true in zip(predicted, truth):
        pred = np.asarray(pred, dtype=np.float64)
        true = np.asarray(true, dtype=np.float64)
        if pred.shape != true.shape:
            raise ContractError(f"feature shapes differ: {pred.shape} vs {true.shape}")
        norms = np.linalg.norm(pred, axis=1) * np.linalg.norm(true, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateMetricError("cosine similarity of a zero-norm feature")
        cosine = np.sum(pred * true, axis=1) / norms
        curves.append(_binned(cosine, bins))
    return np.mean(curves, axis=0)


def dominance_fraction(upper: np.ndarray, lower: np.ndarray) -> float:
    """Fraction of bins where `upper` >= `lower`"""
    return float(np.mean(np.asarray(upper) >= np.asarray(lower)))
