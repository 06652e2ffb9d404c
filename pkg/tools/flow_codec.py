# tools/flow_codec.py - Convolutional autoencoder over 16x16 grids of tracked flow points
from typing import List, Optional, Sequence, Tuple

import numpy as np

from models.trajectory_models import Dataset, Demonstration
from tools import gradkit as gk
from utils.errors import ContractError

GRID_SIDE = 16
POINTS = GRID_SIDE * GRID_SIDE
HIDDEN_CHANNELS = 8
LATENT_SHAPE = (2, 8, 8)
LATENT_DIM = 128


def grid_from_points(points: np.ndarray) -> np.ndarray:
    """(256, 2) points -> (2, 16, 16) grid; point j lands at row j // 16, col j % 16"""
    points = np.asarray(points, dtype=np.float64)
    if points.shape != (POINTS, 2):
        raise ContractError(f"expected 256 points of dimension 2, got shape {points.shape}")
    return points.T.reshape(2, GRID_SIDE, GRID_SIDE).copy()


def points_from_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape != (2, GRID_SIDE, GRID_SIDE):
        raise ContractError(f"expected a 2x16x16 grid, got shape {grid.shape}")
    return grid.reshape(2, POINTS).T.copy()


class FlowCodec:
    """Strided conv encoder (2->8->2 channels, 16x16 -> 8x8) and its transposed mirror"""

    PARAM_NAMES = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2")

    def __init__(self, seed: int = 0, dirac: bool = False):
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, shape)

        c = HIDDEN_CHANNELS
        self.enc_w1 = gk.Parameter(uniform((c, 2, 3, 3), 2 * 9), name="enc_w1")
        self.enc_b1 = gk.Parameter(uniform(c, 2 * 9), name="enc_b1")
        self.enc_w2 = gk.Parameter(uniform((2, c, 1, 1), c), name="enc_w2")
        self.enc_b2 = gk.Parameter(uniform(2, c), name="enc_b2")
        # transposed-conv weights are laid out (in, out, kh, kw)
        self.dec_w1 = gk.Parameter(uniform((2, c, 1, 1), 2), name="dec_w1")
        self.dec_b1 = gk.Parameter(uniform(c, 2), name="dec_b1")
        self.dec_w2 = gk.Parameter(uniform((c, 2, 3, 3), c * 9), name="dec_w2")
        self.dec_b2 = gk.Parameter(uniform(2, c * 9), name="dec_b2")
        if dirac:
            self._dirac_init()

    def _dirac_init(self):
        """Encoder and first decoder layer carry the two input channels straight through"""
        for param in (self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.dec_w1):
            param.value[...] = 0.0
        centre = self.enc_w1.value.shape[-1] // 2
        for k in range(2):
            self.enc_w1.value[k, k, centre, centre] = 1.0
            self.enc_w2.value[k, k, 0, 0] = 1.0
            self.dec_w1.value[k, k, 0, 0] = 1.0

    @property
    def params(self) -> List[gk.Parameter]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def weights(self) -> List[np.ndarray]:
        return [p.value.copy() for p in self.params]

    @classmethod
    def from_weights(cls, weights: Sequence[np.ndarray]) -> "FlowCodec":
        codec = cls()
        if len(weights) != len(cls.PARAM_NAMES):
            raise ContractError(f"codec needs {len(cls.PARAM_NAMES)} arrays, got {len(weights)}")
        for param, value in zip(codec.params, weights):
            if param.value.shape != np.shape(value):
                raise ContractError(f"codec weight '{param.name}' has shape {np.shape(value)}")
            param.value[...] = value
        return codec

    def fit_output_layer(self, grids: np.ndarray, chunk: int = 256):
        """
        Least-squares solve of the last decoder layer on (N, 2, 16, 16) frames

        The earlier layers stay fixed; the output ReLU is left out of the fit.
        """
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim != 4 or grids.shape[0] == 0:
            raise ContractError("output layer fit needs at least one (2, 16, 16) frame")
        c, out, kh, kw = self.dec_w2.value.shape
        columns = c * kh * kw + 1
        gram = np.zeros((columns, columns))
        rhs = np.zeros((columns, out))
        for start in range(0, grids.shape[0], chunk):
            batch = grids[start:start + chunk]
            design = self._output_design(batch)
            targets = batch.transpose(0, 2, 3, 1).reshape(-1, out)
            gram += design.T @ design
            rhs += design.T @ targets
        solution = np.linalg.lstsq(gram, rhs, rcond=None)[0]
        self.dec_w2.value[...] = solution[:-1].reshape(c, kh, kw, out).transpose(0, 3, 1, 2)
        self.dec_b2.value[...] = solution[-1]

    def _output_design(self, grids: np.ndarray) -> np.ndarray:
        # one column per (hidden channel, tap) of the stride-2 transposed conv, plus the bias
        h = gk.conv_transpose2d(self.encode_graph(grids), self.dec_w1, self.dec_b1).value
        n, c, height, width = h.shape
        kh, kw = self.dec_w2.value.shape[2:]
        full_h, full_w = 2 * (height - 1) + kh + 1, 2 * (width - 1) + kw + 1
        columns = []
        for k in range(c):
            for a in range(kh):
                for b in range(kw):
                    full = np.zeros((n, full_h, full_w))
                    full[:, a:a + 2 * (height - 1) + 1:2, b:b + 2 * (width - 1) + 1:2] = h[:, k]
                    columns.append(full[:, 1:1 + GRID_SIDE, 1:1 + GRID_SIDE].ravel())
        columns.append(np.ones(n * GRID_SIDE * GRID_SIDE))
        return np.stack(columns, axis=1)

    # Graph versions, batched (N, C, H, W)

    def encode_graph(self, grids: gk.TensorLike) -> gk.Tensor:
        h = gk.conv2d(grids, self.enc_w1, self.enc_b1, stride=2, padding=1)
        return gk.conv2d(h, self.enc_w2, self.enc_b2)

    def decode_graph(self, latents: gk.TensorLike) -> gk.Tensor:
        h = gk.conv_transpose2d(latents, self.dec_w1, self.dec_b1)
        h = gk.conv_transpose2d(h, self.dec_w2, self.dec_b2, stride=2, padding=1, output_padding=1)
        return gk.relu(h)

    def reconstruction_loss(self, grids: np.ndarray) -> gk.Tensor:
        """mean over frames of ||decode(encode(x)) - x||^2"""
        grids = np.asarray(grids, dtype=np.float64)
        diff = gk.sub(self.decode_graph(self.encode_graph(grids)), grids)
        return gk.scale(gk.sum_squares(diff), 1.0 / grids.shape[0])


def _batched(array: np.ndarray, single_shape) -> Tuple[np.ndarray, bool]:
    array = np.asarray(array, dtype=np.float64)
    if array.shape == tuple(single_shape):
        return array[None], True
    if array.shape[1:] != tuple(single_shape):
        raise ContractError(f"expected shape {tuple(single_shape)} or a batch of it, got {array.shape}")
    return array, False


def encode_flow(grid: np.ndarray, codec: FlowCodec) -> np.ndarray:
    """(2, 16, 16) grid -> (2, 8, 8) latent; batches of grids are accepted too"""
    grids, single = _batched(grid, (2, GRID_SIDE, GRID_SIDE))
    latent = codec.encode_graph(grids).value
    return latent[0] if single else latent


def decode_flow(latent: np.ndarray, codec: FlowCodec) -> np.ndarray:
    """(2, 8, 8) or flattened 128 latent -> nonnegative (2, 16, 16) grid"""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-1] == LATENT_DIM and latent.ndim <= 2:
        latent = latent.reshape(latent.shape[:-1] + LATENT_SHAPE)
    latents, single = _batched(latent, LATENT_SHAPE)
    grid = codec.decode_graph(latents).value
    return grid[0] if single else grid


def decode_points(feature: np.ndarray, codec: FlowCodec) -> np.ndarray:
    """128-dim flow feature -> (256, 2) pixel points"""
    return points_from_grid(decode_flow(feature, codec))


def reconstruction_rmse(codec: FlowCodec, frames: np.ndarray) -> float:
    """Point RMSE in pixels over (N, 256, 2) frames"""
    frames = np.asarray(frames, dtype=np.float64)
    grids = np.stack([grid_from_points(f) for f in frames])
    recon = decode_flow(encode_flow(grids, codec), codec)
    squared = np.sum((recon - grids) ** 2, axis=1)
    return float(np.sqrt(np.mean(squared)))


def pooled_grids(dataset: Dataset) -> np.ndarray:
    """Every flow frame of every demo as (N, 2, 16, 16)"""
    frames = [demo.flow_points for demo in dataset.demos if demo.flow_points is not None]
    if not frames:
        raise ContractError("dataset carries no flow points")
    points = np.concatenate(frames, axis=0)
    return np.stack([grid_from_points(p) for p in points])


def encode_dataset(dataset: Dataset, codec: FlowCodec) -> Dataset:
    """Replace features with flattened 128-dim codec latents of the flow frames"""
    demos: List[Demonstration] = []
    for index, demo in enumerate(dataset.demos):
        if demo.flow_points is None:
            raise ContractError(f"demo {index} has no flow points to encode")
        grids = np.stack([grid_from_points(p) for p in demo.flow_points])
        latents = encode_flow(grids, codec).reshape(demo.length, LATENT_DIM)
        demos.append(demo.model_copy(update={"features": latents}))
    return Dataset(demos=demos, d_q=dataset.d_q, d_f=LATENT_DIM, d_g=dataset.d_g)


def flow_centroid(points: np.ndarray) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2).mean(axis=0)


def optional_codec(weights: Optional[Sequence[np.ndarray]]) -> Optional[FlowCodec]:
    return None if weights is None else FlowCodec.from_weights(weights)
