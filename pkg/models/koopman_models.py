# models/koopman_models.py - Trained Koopman artifacts and training configuration
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class LiftKind(str, Enum):
    IDENTITY = "identity"
    V1 = "v1"
    V2 = "v2"
    V3 = "v3"
    MLP = "mlp"

    @property
    def is_polynomial(self) -> bool:
        return self in (LiftKind.V1, LiftKind.V2, LiftKind.V3)


class TrainConfig(BaseModel):
    """Co-training recipe for the encoder and Koopman matrix"""
    lift: LiftKind = LiftKind.MLP
    lift_dim: int = Field(256, ge=1)
    hidden_widths: Tuple[int, int] = (128, 256)
    encoder_lr: float = Field(5e-4, gt=0)
    koopman_lr: float = Field(5e-5, gt=0)
    separate_lr: bool = True
    horizon: int = Field(15, ge=1)
    identity_init: bool = True
    clip_max_norm: float = Field(1.0, gt=0)
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    detach_targets: bool = True
    truncate_tail: bool = True
    freeze_koopman: bool = False
    koopman_refit: bool = True
    refit_ridge: float = Field(1e-6, gt=0)
    encoder_output_scale: float = Field(1e-2, gt=0)
    log_every: int = Field(10, ge=1)

    @property
    def effective_koopman_lr(self) -> float:
        return self.koopman_lr if self.separate_lr else self.encoder_lr


class ModelDims(BaseModel):
    d_q: int
    d_f: int
    d_g: int = 0
    d_xi: int
    d_psi: int = 0
    d_z: int


class TrainingHistory(BaseModel):
    """Per-epoch curves; index 0 is the state before the first update"""
    epochs: int = 0
    seed: int = 0
    losses: List[float] = []
    spectral_radii: List[float] = []


class KoopmanModel(BaseModel):
    """Lifting parameters, Koopman matrix and everything needed to plan"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lift: LiftKind
    K: np.ndarray
    dims: ModelDims
    rescale_factor: float
    horizon: int = 1
    hidden_widths: Optional[Tuple[int, int]] = None
    encoder_weights: Optional[List[np.ndarray]] = None
    codec_weights: Optional[List[np.ndarray]] = None
    history: TrainingHistory = Field(default_factory=TrainingHistory)

    @property
    def feature_slice(self) -> slice:
        """Where the rescaled visual feature block sits inside a latent"""
        start = 2 * self.dims.d_q if self.lift.is_polynomial else self.dims.d_q
        return slice(start, start + self.dims.d_f)

    @property
    def has_goal(self) -> bool:
        return self.dims.d_g > 0
