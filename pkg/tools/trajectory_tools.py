# tools/trajectory_tools.py - Dataset file I/O, initial-frame augmentation and feature rescaling
import json
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from models.trajectory_models import Dataset, DemoRecord, Demonstration
from utils.errors import (
    AugmentationError,
    DatasetParseError,
    DegenerateScaleError,
    DimensionMismatchError,
    EmptyDatasetError,
    StateIndexError,
)

FLOW_POINT_COUNT = 256


def _demo_from_record(record: DemoRecord, index: int) -> Demonstration:
    actions = np.asarray(record.actions, dtype=np.float64)
    features = np.asarray(record.features, dtype=np.float64)
    initial = np.asarray(record.initial_joints, dtype=np.float64)

    if actions.ndim != 2 or features.ndim != 2:
        raise DimensionMismatchError(index, "actions and features must be rectangular")
    if actions.shape[0] == 0:
        raise DimensionMismatchError(index, "demonstration has no frames")
    if actions.shape[0] != features.shape[0]:
        raise DimensionMismatchError(
            index, f"{actions.shape[0]} actions but {features.shape[0]} features")
    if initial.shape != (actions.shape[1],):
        raise DimensionMismatchError(
            index, f"initial_joints has length {initial.size}, expected {actions.shape[1]}")

    flow = None
    if record.flow_points is not None:
        flow = np.asarray(record.flow_points, dtype=np.float64)
        if flow.shape != (actions.shape[0], FLOW_POINT_COUNT, 2):
            raise DimensionMismatchError(
                index, f"flow_points shape {flow.shape}, expected ({actions.shape[0]}, 256, 2)")

    goal = None if record.goal is None else np.asarray(record.goal, dtype=np.float64)
    return Demonstration(actions=actions, features=features, initial_joints=initial,
                         flow_points=flow, goal_feature=goal)


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a JSON-lines dataset; dimensions come from the first demonstration

    Args:
        path: dataset file, one demonstration object per line

    Returns:
        Dataset with rescale_factor unset
    """
    demos: List[Demonstration] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = DemoRecord.model_validate(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as e:
                raise DatasetParseError(line_number, str(e).splitlines()[0]) from e
            try:
                demos.append(_demo_from_record(record, len(demos)))
            except ValueError as e:
                raise DatasetParseError(line_number, str(e)) from e

    if not demos:
        raise EmptyDatasetError(f"no demonstrations in {path}")

    first = demos[0]
    for index, demo in enumerate(demos):
        if demo.d_q != first.d_q:
            raise DimensionMismatchError(index, f"action length {demo.d_q}, expected {first.d_q}")
        if demo.d_f != first.d_f:
            raise DimensionMismatchError(index, f"feature length {demo.d_f}, expected {first.d_f}")
        if (demo.goal_feature is None) != (first.goal_feature is None) or demo.d_g != first.d_g:
            raise DimensionMismatchError(index, "goal presence or length differs from demo 0")

    logger.info(f"📂 Loaded {len(demos)} demonstrations from {path} "
                f"(d_q={first.d_q}, d_f={first.d_f}, d_g={first.d_g})")
    return Dataset(demos=demos, d_q=first.d_q, d_f=first.d_f, d_g=first.d_g)


def _raw_demo(demo: Demonstration) -> Demonstration:
    if not demo.augmented:
        return demo
    return Demonstration(
        actions=demo.actions[1:], features=demo.features[1:], initial_joints=demo.initial_joints,
        flow_points=None if demo.flow_points is None else demo.flow_points[1:],
        goal_feature=demo.goal_feature,
    )


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write the JSON-lines format; augmented demos are stored un-augmented"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for demo in dataset.demos:
            demo = _raw_demo(demo)
            record = {
                "initial_joints": demo.initial_joints.tolist(),
                "actions": demo.actions.tolist(),
                "features": demo.features.tolist(),
            }
            if demo.flow_points is not None:
                record["flow_points"] = demo.flow_points.tolist()
            if demo.goal_feature is not None:
                record["goal"] = demo.goal_feature.tolist()
            handle.write(json.dumps(record) + "\n")
    logger.debug(f"Saved {len(dataset)} demonstrations to {path}")


def augment_initial(demo: Demonstration) -> Demonstration:
    """Prepend the auxiliary initial frame: a_0 = initial joints, feature_0 = feature_1"""
    if demo.augmented:
        raise AugmentationError("demonstration is already augmented")
    flow = None
    if demo.flow_points is not None:
        flow = np.concatenate([demo.flow_points[:1], demo.flow_points], axis=0)
    return Demonstration(
        actions=np.vstack([demo.initial_joints[None, :], demo.actions]),
        features=np.vstack([demo.features[:1], demo.features]),
        initial_joints=demo.initial_joints,
        flow_points=flow,
        goal_feature=demo.goal_feature,
        augmented=True,
    )


def compute_rescale(dataset: Dataset) -> float:
    """c = mean ||a|| / mean ||phi||, pooled over every frame of every demo"""
    if not dataset.demos:
        raise EmptyDatasetError("cannot rescale an empty dataset")
    actions = np.concatenate([demo.actions for demo in dataset.demos], axis=0)
    features = np.concatenate([demo.features for demo in dataset.demos], axis=0)
    feature_norm = float(np.mean(np.linalg.norm(features, axis=1)))
    if feature_norm == 0.0:
        raise DegenerateScaleError("all feature vectors are zero")
    c = float(np.mean(np.linalg.norm(actions, axis=1))) / feature_norm
    if c <= 0.0:
        raise DegenerateScaleError("all action vectors are zero")
    dataset.rescale_factor = c
    return c


def behavioral_state(demo: Demonstration, t: int, c: float) -> np.ndarray:
    """xi_t = [a_t; c*phi_t (; c*goal)]"""
    if not 0 <= t < demo.length:
        raise StateIndexError(f"time index {t} outside [0, {demo.length})")
    parts = [demo.actions[t], c * demo.features[t]]
    if demo.goal_feature is not None:
        parts.append(c * demo.goal_feature)
    return np.concatenate(parts)


def behavioral_states(demo: Demonstration, c: float) -> np.ndarray:
    """All behavioral states of a demo stacked row-wise"""
    parts = [demo.actions, c * demo.features]
    if demo.goal_feature is not None:
        parts.append(np.tile(c * demo.goal_feature, (demo.length, 1)))
    return np.concatenate(parts, axis=1)


def build_state(action: np.ndarray, feature: np.ndarray, c: float,
                goal: Optional[np.ndarray] = None) -> np.ndarray:
    parts = [np.asarray(action, dtype=np.float64), c * np.asarray(feature, dtype=np.float64)]
    if goal is not None:
        parts.append(c * np.asarray(goal, dtype=np.float64))
    return np.concatenate(parts)


def prepare_dataset(dataset: Dataset) -> Dataset:
    """Augment every demo, then compute the rescale factor on the augmented data"""
    prepared = Dataset(
        demos=[demo if demo.augmented else augment_initial(demo) for demo in dataset.demos],
        d_q=dataset.d_q, d_f=dataset.d_f, d_g=dataset.d_g,
    )
    c = compute_rescale(prepared)
    logger.info(f"Prepared {len(prepared)} demonstrations, rescale factor c={c:.6g}")
    return prepared
