# agents/flow_ae_trainer.py
from typing import List, Optional

import numpy as np
from loguru import logger

from tools import gradkit as gk
from tools.flow_codec import FlowCodec
from utils.errors import ContractError, NonFiniteLossError


class FlowAETrainerAgent:
    """Fits the flow-point autoencoder on flow frames pooled across demonstrations"""

    def __init__(self, learning_rate: float = 1e-3, epochs: int = 300, lr_decay: float = 0.99,
                 batch_size: int = 64, seed: int = 0, log_every: int = 25):
        self.name = "Flow Autoencoder Trainer Agent"
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.seed = seed
        self.log_every = log_every
        self.losses: List[float] = []

    def train(self, grids: np.ndarray, codec: Optional[FlowCodec] = None) -> FlowCodec:
        """
        Minimize mean reconstruction error over independent frames

        Args:
            grids: (N, 2, 16, 16) flow grids
            codec: codec to continue training; when None a fresh one starts from the
                channel pass-through init with its output layer solved in closed form

        Returns:
            Trained codec; per-epoch losses are kept on self.losses
        """
        grids = np.asarray(grids, dtype=np.float64)
        if grids.ndim != 4 or grids.shape[0] == 0:
            raise ContractError("flow autoencoder needs at least one (2, 16, 16) frame")
        rng = np.random.default_rng(self.seed)
        if codec is None:
            codec = FlowCodec(seed=self.seed, dirac=True)
            codec.fit_output_layer(grids)

        optimizer = gk.AdamOptimizer([gk.ParamGroup("flow_codec", codec.params, self.learning_rate)])
        self.losses = [self._full_loss(codec, grids)]
        logger.info(f"🌀 Training flow autoencoder on {grids.shape[0]} frames, "
                    f"initial loss={self.losses[0]:.6g}")

        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(grids.shape[0])
            for start in range(0, len(order), self.batch_size):
                batch = grids[order[start:start + self.batch_size]]
                optimizer.zero_grad()
                loss = codec.reconstruction_loss(batch)
                if not np.isfinite(loss.item()):
                    raise NonFiniteLossError(
                        f"non-finite reconstruction loss at epoch {epoch}",
                        snapshot={"epoch": epoch, "losses": list(self.losses)},
                    )
                gk.backward(loss)
                optimizer.step()
            optimizer.decay_learning_rates(self.lr_decay)
            self.losses.append(self._full_loss(codec, grids))
            if epoch % self.log_every == 0 or epoch == self.epochs:
                logger.info(f"Flow AE epoch {epoch}/{self.epochs} loss={self.losses[-1]:.6g}")
        self._refit_output_layer(codec, grids)
        return codec

    def _refit_output_layer(self, codec: FlowCodec, grids: np.ndarray):
        """Closed-form pass over the last decoder layer; kept only when the loss does not rise"""
        before = codec.weights()
        codec.fit_output_layer(grids)
        loss = self._full_loss(codec, grids)
        if np.isfinite(loss) and loss <= self.losses[-1]:
            self.losses[-1] = loss
        else:
            for param, value in zip(codec.params, before):
                param.value[...] = value
        logger.debug(f"Flow AE output-layer refit, final loss={self.losses[-1]:.6g}")

    @staticmethod
    def _full_loss(codec: FlowCodec, grids: np.ndarray) -> float:
        return codec.reconstruction_loss(grids).item()


def train_flow_ae(grids: np.ndarray, learning_rate: float = 1e-3, epochs: int = 300,
                  lr_decay: float = 0.99, batch_size: int = 64, seed: int = 0) -> FlowCodec:
    agent = FlowAETrainerAgent(learning_rate, epochs, lr_decay, batch_size, seed)
    return agent.train(grids)
