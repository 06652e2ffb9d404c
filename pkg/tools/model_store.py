# tools/model_store.py - Versioned JSON container for trained models and flow codecs
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from models.koopman_models import KoopmanModel, LiftKind, ModelDims, TrainingHistory
from tools.flow_codec import FlowCodec
from utils.errors import ContractError, CorruptModelError, VersionMismatchError

FORMAT_VERSION = 1
MODEL_EXTENSION = ".kubm"

# File layout: one JSON object
#   {"format_version": 1, "kind": "koopman-model" | "flow-codec",
#    "dims": {...}, "lift": "...", "payload": {...}}
# Arrays are nested lists of floats written with shortest round-trip repr,
# so a save/load cycle is bit-exact.


def _arrays_to_lists(arrays: Optional[List[np.ndarray]]) -> Optional[List[Any]]:
    return None if arrays is None else [np.asarray(a).tolist() for a in arrays]


def _lists_to_arrays(lists: Optional[List[Any]]) -> Optional[List[np.ndarray]]:
    return None if lists is None else [np.asarray(a, dtype=np.float64) for a in lists]


def _write_container(path: Union[str, Path], kind: str, header: Dict[str, Any],
                     payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"format_version": FORMAT_VERSION, "kind": kind, **header, "payload": payload}
    path.write_text(json.dumps(document, allow_nan=False), encoding="utf-8")
    return path


def _read_container(path: Union[str, Path], kind: str) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CorruptModelError(f"cannot read {path}: {e}") from e
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise CorruptModelError(f"{path} is truncated or not a model container: {e}") from e
    if not isinstance(document, dict) or "format_version" not in document:
        raise CorruptModelError(f"{path} has no container header")
    if document["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has format_version {document['format_version']}, expected {FORMAT_VERSION}")
    if document.get("kind") != kind:
        raise CorruptModelError(f"{path} holds a '{document.get('kind')}', expected '{kind}'")
    if "payload" not in document:
        raise CorruptModelError(f"{path} has no payload")
    return document


def save_model(model: KoopmanModel, path: Union[str, Path]) -> Path:
    header = {"dims": model.dims.model_dump(), "lift": model.lift.value}
    payload = {
        "K": model.K.tolist(),
        "rescale_factor": model.rescale_factor,
        "horizon": model.horizon,
        "hidden_widths": None if model.hidden_widths is None else list(model.hidden_widths),
        "encoder_weights": _arrays_to_lists(model.encoder_weights),
        "codec_weights": _arrays_to_lists(model.codec_weights),
        "history": model.history.model_dump(),
    }
    path = _write_container(path, "koopman-model", header, payload)
    logger.info(f"💾 Model saved to {path} (lift={model.lift.value}, d_z={model.dims.d_z})")
    return path


def load_model(path: Union[str, Path]) -> KoopmanModel:
    document = _read_container(path, "koopman-model")
    payload = document["payload"]
    try:
        dims = ModelDims.model_validate(document["dims"])
        K = np.asarray(payload["K"], dtype=np.float64)
        model = KoopmanModel(
            lift=LiftKind(document["lift"]),
            K=K,
            dims=dims,
            rescale_factor=float(payload["rescale_factor"]),
            horizon=int(payload["horizon"]),
            hidden_widths=None if payload["hidden_widths"] is None else tuple(payload["hidden_widths"]),
            encoder_weights=_lists_to_arrays(payload["encoder_weights"]),
            codec_weights=_lists_to_arrays(payload["codec_weights"]),
            history=TrainingHistory.model_validate(payload["history"]),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise CorruptModelError(f"{path} payload is inconsistent: {e}") from e
    if K.shape != (dims.d_z, dims.d_z):
        raise CorruptModelError(f"K has shape {K.shape}, header says d_z={dims.d_z}")
    if not np.all(np.isfinite(K)):
        raise CorruptModelError("K contains non-finite entries")
    logger.debug(f"Loaded model from {path}")
    return model


def save_codec(codec: FlowCodec, path: Union[str, Path]) -> Path:
    path = _write_container(path, "flow-codec", {"dims": {"latent": 128}, "lift": None},
                            {"weights": _arrays_to_lists(codec.weights())})
    logger.info(f"💾 Flow codec saved to {path}")
    return path


def load_codec(path: Union[str, Path]) -> FlowCodec:
    document = _read_container(path, "flow-codec")
    try:
        return FlowCodec.from_weights(_lists_to_arrays(document["payload"]["weights"]))
    except (KeyError, TypeError, ContractError) as e:
        raise CorruptModelError(f"{path} codec payload is inconsistent: {e}") from e
