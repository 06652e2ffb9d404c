# agents/koopman_trainer.py
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from models.koopman_models import KoopmanModel, LiftKind, ModelDims, TrainConfig, TrainingHistory
from models.trajectory_models import Dataset
from tools import gradkit as gk
from tools.lifting import SpectralEncoder, assemble_latent, encoder_of, latent_dim, lift_states
from tools.trajectory_tools import behavioral_states
from utils.errors import ContractError, NonFiniteLossError, SpectralConvergenceError

EIG_MAX_DIM = 64
POWER_MAX_ITER = 2000
POWER_TOL = 1e-12


# Closed-form fitting

def fit_edmd_arrays(X: np.ndarray, Y: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """K minimizing sum ||K x_n - y_n||^2 over rows of X, Y (minimum-norm when ridge is 0)"""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("EDMD needs at least one (z_t, z_t+1) pair")
    if X.shape != Y.shape:
        raise ContractError(f"EDMD pair shapes differ: {X.shape} vs {Y.shape}")
    d_z = X.shape[1]

    if ridge > 0.0:
        gram = X.T @ X + ridge * np.eye(d_z)
        return np.linalg.solve(gram, X.T @ Y).T

    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    cutoff = (S[0] if S.size else 0.0) * d_z * np.finfo(np.float64).eps
    keep = S > cutoff
    if not np.any(keep):
        return np.zeros((d_z, d_z))
    X_pinv = Vt[keep].T @ np.diag(1.0 / S[keep]) @ U[:, keep].T
    return (X_pinv @ Y).T


def fit_lifted_arrays(X: np.ndarray, Y: np.ndarray, num_free: int, ridge: float) -> np.ndarray:
    """Least-squares K with a Tikhonov weight on the columns from num_free onwards

    The first num_free columns (the behavioral state) are unpenalized, so
    rows of Y that are exactly linear in them are fit with zero weight on
    the penalized block.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError("least-squares refit needs at least one (z_t, z_t+1) pair")
    if X.shape != Y.shape:
        raise ContractError(f"refit pair shapes differ: {X.shape} vs {Y.shape}")
    d_z = X.shape[1]
    if not 0 <= num_free <= d_z:
        raise ContractError(f"num_free={num_free} outside [0, {d_z}]")
    weights = np.zeros(d_z)
    weights[num_free:] = np.sqrt(ridge)
    A = np.vstack([X, np.diag(weights)])
    B = np.vstack([Y, np.zeros((d_z, d_z))])
    solution, *_ = np.linalg.lstsq(A, B, rcond=None)
    return solution.T


def fit_edmd(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], ridge: float = 0.0) -> np.ndarray:
    if len(pairs) == 0:
        raise ContractError("EDMD needs at least one (z_t, z_t+1) pair")
    X = np.stack([np.atleast_1d(np.asarray(z, dtype=np.float64)) for z, _ in pairs])
    Y = np.stack([np.atleast_1d(np.asarray(z, dtype=np.float64)) for _, z in pairs])
    return fit_edmd_arrays(X, Y, ridge)


# Coherence loss

def _coherence_sum(K: np.ndarray, Z: np.ndarray, horizon: int, truncate_tail: bool) -> Tuple[float, int]:
    """(sum over anchors of the multi-step error, number of anchors)"""
    n = Z.shape[0]
    if n < 2:
        raise ContractError("coherence loss needs a trajectory of length >= 2")
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    if truncate_tail:
        anchors = n - 1
        steps = min(horizon, n - 1)
    else:
        if n < horizon + 1:
            raise ContractError(f"trajectory of length {n} is shorter than horizon + 1 = {horizon + 1}")
        anchors = n - horizon
        steps = horizon

    total = 0.0
    P = Z[:anchors] if not truncate_tail else Z[:-1]
    for l in range(1, steps + 1):
        P = P @ K.T
        count = min(anchors, n - l)
        diff = P[:count] - Z[l:l + count]
        total += float(np.sum(diff * diff))
    return total, anchors


def coherence_loss(model: Union[KoopmanModel, np.ndarray], latents: np.ndarray, horizon: int,
                   truncate_tail: bool = True) -> float:
    """Mean over anchors t of sum_{l=1..H} ||K^l z_t - z_{t+l}||^2

    Anchors near the end use the truncated horizon min(H, T - t) unless
    truncate_tail is off, in which case only anchors with a full horizon count.
    """
    K = model.K if isinstance(model, KoopmanModel) else np.asarray(model, dtype=np.float64)
    Z = np.asarray(latents, dtype=np.float64)
    total, anchors = _coherence_sum(K, Z, horizon, truncate_tail)
    return total / anchors


def dataset_latents(model: KoopmanModel, dataset: Dataset,
                    encoder: Optional[SpectralEncoder] = None) -> List[np.ndarray]:
    c = dataset.rescale_factor if dataset.rescale_factor is not None else model.rescale_factor
    if encoder is None and model.lift is LiftKind.MLP:
        encoder = encoder_of(model)
    return [lift_states(model.lift, behavioral_states(demo, c), model.dims.d_q, encoder)
            for demo in dataset.demos]


def evaluate_coherence(model: KoopmanModel, dataset: Dataset, horizon: Optional[int] = None,
                       truncate_tail: bool = True, encoder: Optional[SpectralEncoder] = None) -> float:
    """Coherence loss pooled over the anchors of every demonstration"""
    horizon = horizon or model.horizon
    total, anchors = 0.0, 0
    for Z in dataset_latents(model, dataset, encoder):
        if not truncate_tail and Z.shape[0] < horizon + 1:
            continue
        demo_total, demo_anchors = _coherence_sum(model.K, Z, horizon, truncate_tail)
        total += demo_total
        anchors += demo_anchors
    if anchors == 0:
        raise ContractError("no demonstration is long enough for the requested horizon")
    return total / anchors


# Spectral diagnostics

def _power_radius(K: np.ndarray, max_iter: int, tol: float, seed: int = 0) -> Tuple[float, bool]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=K.shape[0])
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(max_iter):
        y = K @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            return 0.0, True
        new_estimate = float(y_norm / np.linalg.norm(x))
        x = y / y_norm
        if abs(new_estimate - estimate) <= tol * max(new_estimate, 1e-300):
            return new_estimate, True
        estimate = new_estimate
    return estimate, False


def spectral_radius(K: np.ndarray, method: str = "auto", max_iter: int = POWER_MAX_ITER,
                    tol: float = POWER_TOL) -> float:
    """Largest eigenvalue modulus of K

    Args:
        K: square matrix
        method: "eig" (dense eigensolve), "power" (power iteration only) or
            "auto" (eig up to 64 dims, otherwise power iteration falling back to eig)

    Returns:
        Spectral radius as a float
    """
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ContractError(f"spectral radius needs a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise ContractError("spectral radius of a non-finite matrix")
    if method == "eig" or (method == "auto" and K.shape[0] <= EIG_MAX_DIM):
        return float(np.max(np.abs(np.linalg.eigvals(K))))

    estimate, converged = _power_radius(K, max_iter, tol)
    if converged:
        return estimate
    if method == "power":
        raise SpectralConvergenceError(estimate, max_iter)
    logger.debug(f"Power iteration stalled at {estimate:.6g}; using dense eigensolve")
    return float(np.max(np.abs(np.linalg.eigvals(K))))


# Gradient co-training

def _windows(num_frames: int, horizon: int, truncate_tail: bool) -> List[Tuple[int, int]]:
    """(start, length) of every training window of one trajectory"""
    if truncate_tail:
        return [(t, min(horizon + 1, num_frames - t)) for t in range(num_frames - 1)]
    return [(t, horizon + 1) for t in range(num_frames - horizon)]


class KoopmanTrainerAgent:
    """Co-trains the spectral encoder and the Koopman matrix with the coherence loss

    With koopman_refit on, K is re-solved in closed form on the current
    latents after every epoch of gradient steps.
    """

    def __init__(self, config: TrainConfig):
        self.name = "Koopman Trainer Agent"
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        self.encoder_seed = int(seeds[0].generate_state(1)[0])
        self.rng = np.random.default_rng(seeds[1])

    def _initial_K(self, d_z: int) -> np.ndarray:
        if self.config.identity_init:
            return np.eye(d_z)
        bound = 1.0 / np.sqrt(d_z)
        return self.rng.uniform(-bound, bound, (d_z, d_z))

    def _window_loss(self, states: np.ndarray, latents: Optional[np.ndarray], K: gk.Tensor,
                     encoder: Optional[SpectralEncoder]) -> gk.Tensor:
        """Summed multi-step error over a stack of equal-length windows

        Args:
            states: (B, L, d_xi) behavioral states (used by the mlp lifting)
            latents: (B, L, d_z) fixed latents for hand-crafted liftings, else None
            K: Koopman matrix node
            encoder: spectral encoder for the mlp lifting

        Returns:
            Scalar tensor
        """
        B, L = states.shape[0], states.shape[1]
        if encoder is None:
            anchor = gk.Tensor(latents[:, 0, :])
            targets = gk.Tensor(latents[:, 1:, :])
        else:
            anchor_xi = states[:, 0, :]
            anchor = gk.concat([gk.Tensor(anchor_xi), encoder.forward_graph(anchor_xi)], axis=-1)
            target_xi = states[:, 1:, :]
            if self.config.detach_targets:
                targets = gk.Tensor(np.concatenate([target_xi, encoder.forward(target_xi)], axis=-1))
            else:
                targets = gk.concat([gk.Tensor(target_xi), encoder.forward_graph(target_xi)], axis=-1)

        loss = None
        prediction = anchor
        for l in range(1, L):
            prediction = gk.linear_map(prediction, K)
            target = gk.reshape(gk.slice_axis(targets, 1, l - 1, l), (B, targets.shape[-1]))
            term = gk.sum_squares(gk.sub(prediction, target))
            loss = term if loss is None else gk.add(loss, term)
        return loss

    def train(self, dataset: Dataset) -> KoopmanModel:
        """
        Co-train encoder and K on fixed-length windows of the prepared dataset

        Args:
            dataset: augmented dataset with rescale_factor set

        Returns:
            KoopmanModel with per-epoch loss and spectral-radius history
        """
        config = self.config
        if dataset.rescale_factor is None or not dataset.is_augmented:
            raise ContractError("training needs an augmented, rescaled dataset")
        c = dataset.rescale_factor
        d_q, d_xi = dataset.d_q, dataset.d_xi
        kind = config.lift
        d_psi = config.lift_dim if kind is LiftKind.MLP else 0
        d_z = latent_dim(kind, d_q, dataset.d_f, dataset.d_g, d_psi)

        encoder = None
        if kind is LiftKind.MLP:
            encoder = SpectralEncoder(d_xi, d_psi, config.hidden_widths, seed=self.encoder_seed,
                                      output_scale=config.encoder_output_scale)

        K_init = self._initial_K(d_z)
        K = gk.Tensor(K_init) if config.freeze_koopman else gk.Parameter(K_init, name="K")

        groups = []
        if encoder is not None:
            groups.append(gk.ParamGroup("encoder", encoder.params, config.encoder_lr))
        if not config.freeze_koopman:
            groups.append(gk.ParamGroup("koopman", [K], config.effective_koopman_lr))
        optimizer = gk.AdamOptimizer(groups, clip_max_norm=config.clip_max_norm) if groups else None

        states = [behavioral_states(demo, c) for demo in dataset.demos]
        fixed_latents = None if encoder is not None else [lift_states(kind, s, d_q) for s in states]
        windows = [(i, start, length) for i, s in enumerate(states)
                   for start, length in _windows(s.shape[0], config.horizon, config.truncate_tail)]
        if not windows:
            raise ContractError("no training windows: demonstrations shorter than the horizon")

        dims = ModelDims(d_q=d_q, d_f=dataset.d_f, d_g=dataset.d_g, d_xi=d_xi, d_psi=d_psi, d_z=d_z)

        def snapshot_model() -> KoopmanModel:
            return KoopmanModel(
                lift=kind, K=K.value.copy(), dims=dims, rescale_factor=c, horizon=config.horizon,
                hidden_widths=encoder.hidden_widths if encoder is not None else None,
                encoder_weights=encoder.weights() if encoder is not None else None,
            )

        history = TrainingHistory(epochs=config.epochs, seed=config.seed)

        def record(epoch: int):
            model = snapshot_model()
            loss = evaluate_coherence(model, dataset, config.horizon, config.truncate_tail, encoder)
            rho = spectral_radius(model.K)
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite coherence loss at epoch {epoch}",
                    snapshot={"epoch": epoch, "spectral_radius": rho,
                              "K_max_abs": float(np.max(np.abs(model.K))), "losses": list(history.losses)},
                )
            history.losses.append(loss)
            history.spectral_radii.append(rho)
            return loss, rho

        loss, rho = record(0)
        logger.info(f"🚀 Training {kind.value} model d_z={d_z} on {len(windows)} windows, "
                    f"epoch 0 loss={loss:.6g} rho={rho:.6g}")

        for epoch in range(1, config.epochs + 1):
            if optimizer is not None:
                order = self.rng.permutation(len(windows))
                for batch_start in range(0, len(order), config.batch_size):
                    batch = [windows[j] for j in order[batch_start:batch_start + config.batch_size]]
                    optimizer.zero_grad()
                    batch_loss = self._batch_loss(batch, states, fixed_latents, K, encoder)
                    if not np.isfinite(batch_loss.item()):
                        raise NonFiniteLossError(
                            f"non-finite batch loss at epoch {epoch}",
                            snapshot={"epoch": epoch, "batch_start": batch_start,
                                      "spectral_radius": spectral_radius(K.value),
                                      "losses": list(history.losses)},
                        )
                    gk.backward(batch_loss)
                    optimizer.step()
            if config.koopman_refit and not config.freeze_koopman:
                K.value[...] = self._refit(states, fixed_latents, encoder, d_xi)
            loss, rho = record(epoch)
            if epoch % config.log_every == 0 or epoch == config.epochs:
                logger.info(f"Epoch {epoch}/{config.epochs} loss={loss:.6g} rho={rho:.6g}")

        model = snapshot_model()
        model.history = history
        logger.info(f"✅ Training finished: loss {history.losses[0]:.6g} -> {history.losses[-1]:.6g}")
        return model

    def _refit(self, states: List[np.ndarray], fixed_latents: Optional[List[np.ndarray]],
               encoder: Optional[SpectralEncoder], d_xi: int) -> np.ndarray:
        """One-step least-squares K on the latents of the current encoder"""
        if fixed_latents is not None:
            latents = fixed_latents
            num_free = latents[0].shape[1]
        else:
            latents = [assemble_latent(s, encoder.forward(s)) for s in states]
            num_free = d_xi
        X = np.concatenate([Z[:-1] for Z in latents if Z.shape[0] > 1], axis=0)
        Y = np.concatenate([Z[1:] for Z in latents if Z.shape[0] > 1], axis=0)
        K = fit_lifted_arrays(X, Y, num_free, self.config.refit_ridge)
        logger.debug(f"Refit K on {X.shape[0]} pairs, one-step residual "
                     f"{float(np.mean(np.sum((X @ K.T - Y) ** 2, axis=1))):.3e}")
        return K

    def _batch_loss(self, batch, states, fixed_latents, K, encoder) -> gk.Tensor:
        by_length: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
        for demo_index, start, length in batch:
            by_length[length].append((demo_index, start))

        total = None
        for length in sorted(by_length):
            members = by_length[length]
            window_states = np.stack([states[i][s:s + length] for i, s in members])
            window_latents = None
            if fixed_latents is not None:
                window_latents = np.stack([fixed_latents[i][s:s + length] for i, s in members])
            term = self._window_loss(window_states, window_latents, K, encoder)
            total = term if total is None else gk.add(total, term)
        return gk.scale(total, 1.0 / len(batch))


def train(dataset: Dataset, config: TrainConfig) -> KoopmanModel:
    return KoopmanTrainerAgent(config).train(dataset)


def fit_model_edmd(dataset: Dataset, lift: LiftKind = LiftKind.V2, ridge: float = 0.0) -> KoopmanModel:
    """Closed-form model for a hand-crafted lifting; pairs never cross demonstrations"""
    lift = LiftKind(lift)
    if lift is LiftKind.MLP:
        raise ContractError("EDMD needs a hand-crafted lifting (identity, v1, v2, v3)")
    if dataset.rescale_factor is None:
        raise ContractError("EDMD needs a rescaled dataset")
    c = dataset.rescale_factor
    latents = [lift_states(lift, behavioral_states(demo, c), dataset.d_q) for demo in dataset.demos]
    X = np.concatenate([Z[:-1] for Z in latents if Z.shape[0] > 1], axis=0)
    Y = np.concatenate([Z[1:] for Z in latents if Z.shape[0] > 1], axis=0)
    K = fit_edmd_arrays(X, Y, ridge)

    d_z = K.shape[0]
    dims = ModelDims(d_q=dataset.d_q, d_f=dataset.d_f, d_g=dataset.d_g, d_xi=dataset.d_xi, d_z=d_z)
    model = KoopmanModel(lift=lift, K=K, dims=dims, rescale_factor=c, horizon=1)
    one_step = float(np.mean(np.sum((X @ K.T - Y) ** 2, axis=1)))
    model.history = TrainingHistory(epochs=0, losses=[one_step], spectral_radii=[spectral_radius(K)])
    logger.info(f"📐 EDMD fit ({lift.value}, d_z={d_z}) on {X.shape[0]} pairs, "
                f"one-step loss={one_step:.3e}, rho={model.history.spectral_radii[0]:.6g}")
    return model
