# synthbench/timing.py - Per-step policy query cost
import time
from typing import Callable, Dict, Optional

import numpy as np

from models.koopman_models import KoopmanModel
from utils.errors import ContractError


def kubm_query(model: KoopmanModel, z0: np.ndarray) -> Callable[[], np.ndarray]:
    """One policy query: advance the latent once and slice out the action"""
    K = model.K
    d_q = model.dims.d_q
    state = {"z": np.asarray(z0, dtype=np.float64).copy()}

    def query() -> np.ndarray:
        state["z"] = K @ state["z"]
        return state["z"][:d_q]

    return query


def timing_probe(query: Callable[[], object], episodes: int = 10, steps_per_episode: int = 50,
                 reset: Optional[Callable[[], None]] = None) -> Dict[str, float]:
    """Wall-clock milliseconds per query, mean and std over every timed step

    Feature extraction is not part of `query`, so it is excluded by construction.
    """
    if episodes < 1 or steps_per_episode < 1:
        raise ContractError("timing probe needs at least one episode and one step")
    samples = []
    for _ in range(episodes):
        if reset is not None:
            reset()
        for _ in range(steps_per_episode):
            start = time.perf_counter()
            query()
            samples.append((time.perf_counter() - start) * 1000.0)
    samples = np.asarray(samples)
    return {"mean_ms": float(samples.mean()), "std_ms": float(samples.std()), "steps": int(samples.size)}
