# tools/lifting.py - Hand-crafted liftings, the spectral encoder and latent assembly
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from models.koopman_models import KoopmanModel, LiftKind
from tools import gradkit as gk
from utils.errors import ContractError


def lifted_dim(n_h: int, n_o: int, variant: LiftKind) -> int:
    """Latent width of the polynomial/trigonometric liftings"""
    if n_h < 1 or n_o < 1:
        raise ContractError("lifting needs n_h >= 1 and n_o >= 1")
    variant = LiftKind(variant)
    pairwise = n_h * (n_h - 1) // 2
    v2 = 2 * n_h + 2 * n_o + pairwise + n_h
    if variant is LiftKind.V1:
        return v2 + n_o
    if variant is LiftKind.V2:
        return v2
    if variant is LiftKind.V3:
        return v2 + 2 * n_h + 2 * n_o
    raise ContractError(f"lifted_dim is defined for v1/v2/v3, not {variant.value}")


def _pairwise(x: np.ndarray) -> np.ndarray:
    rows, cols = np.triu_indices(x.shape[-1], k=1)
    return x[..., rows] * x[..., cols]


def lift(x_h: np.ndarray, x_o: np.ndarray, variant: LiftKind) -> np.ndarray:
    """Fixed-order lifting; works on single vectors or row-stacked batches

    Order: [x_h, x_h^2, x_o, x_o^2], then
      v1: [x_o^3, pairwise(x_h), x_h^3]
      v2: [pairwise(x_h), x_h^3]
      v3: v2 extras + [cos x_h, sin x_h, cos x_o, sin x_o]
    Pairwise terms are x_i * x_j for i < j in lexicographic order.
    """
    variant = LiftKind(variant)
    x_h = np.asarray(x_h, dtype=np.float64)
    x_o = np.asarray(x_o, dtype=np.float64)
    if x_h.shape[:-1] != x_o.shape[:-1]:
        raise ContractError("x_h and x_o batch shapes differ")
    blocks = [x_h, x_h ** 2, x_o, x_o ** 2]
    if variant is LiftKind.V1:
        blocks += [x_o ** 3, _pairwise(x_h), x_h ** 3]
    elif variant in (LiftKind.V2, LiftKind.V3):
        blocks += [_pairwise(x_h), x_h ** 3]
        if variant is LiftKind.V3:
            blocks += [np.cos(x_h), np.sin(x_h), np.cos(x_o), np.sin(x_o)]
    else:
        raise ContractError(f"lift is defined for v1/v2/v3, not {variant.value}")
    return np.concatenate(blocks, axis=-1)


class SpectralEncoder:
    """Three-layer rectified MLP xi -> psi (widths d_xi, h1, h2, d_psi)

    output_scale multiplies the initial range of the last layer only.
    """

    def __init__(self, d_xi: int, d_psi: int = 256, hidden_widths: Tuple[int, int] = (128, 256),
                 seed: int = 0, output_scale: float = 1.0):
        self.widths = (d_xi, *hidden_widths, d_psi)
        rng = np.random.default_rng(seed)
        self.params: List[gk.Parameter] = []
        for layer, (fan_in, fan_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if layer == 2:
                bound *= output_scale
            self.params.append(gk.Parameter(rng.uniform(-bound, bound, (fan_out, fan_in)), name=f"W{layer}"))
            self.params.append(gk.Parameter(rng.uniform(-bound, bound, fan_out), name=f"b{layer}"))

    @property
    def d_xi(self) -> int:
        return self.widths[0]

    @property
    def d_psi(self) -> int:
        return self.widths[-1]

    @property
    def hidden_widths(self) -> Tuple[int, int]:
        return tuple(self.widths[1:-1])

    def weights(self) -> List[np.ndarray]:
        return [p.value.copy() for p in self.params]

    @classmethod
    def from_weights(cls, weights: Sequence[np.ndarray]) -> "SpectralEncoder":
        if len(weights) != 6:
            raise ContractError(f"encoder needs 6 weight arrays, got {len(weights)}")
        d_xi = weights[0].shape[1]
        encoder = cls(d_xi, weights[4].shape[0], (weights[0].shape[0], weights[2].shape[0]))
        for param, value in zip(encoder.params, weights):
            if param.value.shape != np.shape(value):
                raise ContractError(f"weight shape {np.shape(value)} != {param.value.shape}")
            param.value[...] = value
        return encoder

    def forward(self, xi: np.ndarray) -> np.ndarray:
        """Plain numpy pass for inference"""
        h = np.asarray(xi, dtype=np.float64)
        if h.shape[-1] != self.d_xi:
            raise ContractError(f"encoder expects input width {self.d_xi}, got {h.shape[-1]}")
        for layer in range(3):
            W, b = self.params[2 * layer].value, self.params[2 * layer + 1].value
            h = h @ W.T + b
            if layer < 2:
                h = np.maximum(h, 0.0)
        return h

    def forward_graph(self, xi: gk.TensorLike) -> gk.Tensor:
        """Same pass recorded on the tape"""
        h = gk.as_tensor(xi)
        for layer in range(3):
            h = gk.affine(h, self.params[2 * layer], self.params[2 * layer + 1])
            if layer < 2:
                h = gk.relu(h)
        return h


def encode(xi: np.ndarray, encoder: SpectralEncoder) -> np.ndarray:
    return encoder.forward(xi)


def assemble_latent(xi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """State-inclusive latent z = [xi; psi]"""
    return np.concatenate([np.asarray(xi, dtype=np.float64), np.asarray(psi, dtype=np.float64)], axis=-1)


def extract_action(z: np.ndarray, d_q: int) -> np.ndarray:
    if d_q > np.shape(z)[-1]:
        raise ContractError(f"d_q={d_q} exceeds latent width {np.shape(z)[-1]}")
    return np.asarray(z)[..., :d_q]


def feature_slice(kind: LiftKind, d_q: int, d_f: int) -> slice:
    """Position of the rescaled feature block inside a latent"""
    start = 2 * d_q if LiftKind(kind).is_polynomial else d_q
    return slice(start, start + d_f)


def latent_dim(kind: LiftKind, d_q: int, d_f: int, d_g: int = 0, d_psi: int = 0) -> int:
    kind = LiftKind(kind)
    d_xi = d_q + d_f + d_g
    if kind is LiftKind.IDENTITY:
        return d_xi
    if kind is LiftKind.MLP:
        return d_xi + d_psi
    return lifted_dim(d_q, d_f + d_g, kind)


def lift_states(kind: LiftKind, states: np.ndarray, d_q: int,
                encoder: Optional[SpectralEncoder] = None) -> np.ndarray:
    """Latents for one state or a row-stacked batch of behavioral states"""
    kind = LiftKind(kind)
    states = np.asarray(states, dtype=np.float64)
    if kind is LiftKind.IDENTITY:
        return states.copy()
    if kind is LiftKind.MLP:
        if encoder is None:
            raise ContractError("mlp lifting needs a spectral encoder")
        return assemble_latent(states, encoder.forward(states))
    return lift(states[..., :d_q], states[..., d_q:], kind)


def encoder_of(model: KoopmanModel) -> Optional[SpectralEncoder]:
    if model.lift is not LiftKind.MLP:
        return None
    if model.encoder_weights is None:
        raise ContractError("mlp model carries no encoder weights")
    return SpectralEncoder.from_weights(model.encoder_weights)


def latent_of(model: KoopmanModel, xi: np.ndarray,
              encoder: Optional[SpectralEncoder] = None) -> np.ndarray:
    """Lift a behavioral state with whatever lifting the model was trained with"""
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[-1] != model.dims.d_xi:
        raise ContractError(f"state width {xi.shape[-1]} != model d_xi {model.dims.d_xi}")
    if encoder is None and model.lift is LiftKind.MLP:
        encoder = encoder_of(model)
    return lift_states(model.lift, xi, model.dims.d_q, encoder)
