# tests/test_koopman_trainer.py
import unittest

import numpy as np

from agents.koopman_trainer import (
    KoopmanTrainerAgent,
    coherence_loss,
    evaluate_coherence,
    fit_edmd,
    fit_edmd_arrays,
    fit_lifted_arrays,
    fit_model_edmd,
    spectral_radius,
)
from models.koopman_models import LiftKind, TrainConfig
from models.trajectory_models import Dataset, Demonstration
from synthbench.demos import generate_demos
from tools import gradkit as gk
from tools.lifting import SpectralEncoder
from tools.trajectory_tools import behavioral_states, prepare_dataset
from utils.errors import ContractError, NonFiniteLossError, SpectralConvergenceError
from workflows.episode_workflow import EpisodeWorkflow, success_rate


def naive_coherence(K, Z, horizon, truncate_tail=True):
    """Brute-force sum over anchors and steps with explicit matrix powers"""
    n = len(Z)
    anchors = range(n - 1) if truncate_tail else range(n - horizon)
    total = 0.0
    for t in anchors:
        for l in range(1, min(horizon, n - 1 - t) + 1):
            prediction = np.linalg.matrix_power(K, l) @ Z[t]
            total += float(np.sum((prediction - Z[t + l]) ** 2))
    return total / len(anchors)


def linear_dataset(num_demos=6, horizon=20, seed=0):
    return prepare_dataset(generate_demos("linear-coupled", num_demos, seed=seed, horizon=horizon,
                                          include_flow=False))


class TestFitEdmd(unittest.TestCase):
    def test_scalar_pair(self):
        """(2 -> 4) gives K = [2]"""
        np.testing.assert_allclose(fit_edmd([(np.array([2.0]), np.array([4.0]))]), [[2.0]])

    def test_all_zero_pairs_give_zero(self):
        K = fit_edmd([(np.zeros(3), np.zeros(3))] * 4)
        np.testing.assert_array_equal(K, np.zeros((3, 3)))

    def test_recovers_stable_generator(self):
        """A 200-step trajectory of A = 0.95 * orthogonal identifies A"""
        rng = np.random.default_rng(0)
        Q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        A = 0.95 * Q
        Z = [rng.normal(size=5)]
        for _ in range(199):
            Z.append(A @ Z[-1])
        Z = np.asarray(Z)
        K = fit_edmd_arrays(Z[:-1], Z[1:])
        self.assertLess(np.linalg.norm(K - A), 1e-8)
        self.assertLess(float(np.sum((Z[:-1] @ K.T - Z[1:]) ** 2)), 1e-16)

    def test_minimum_norm_on_rank_deficient_data(self):
        """Only the observed direction is determined; the rest stays zero"""
        X = np.array([[1.0, 0.0], [2.0, 0.0]])
        Y = np.array([[3.0, 1.0], [6.0, 2.0]])
        np.testing.assert_allclose(fit_edmd_arrays(X, Y), [[3.0, 0.0], [1.0, 0.0]], atol=1e-12)

    def test_ridge_matches_closed_form(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
        expected = np.linalg.solve(X.T @ X + 0.5 * np.eye(4), X.T @ Y).T
        np.testing.assert_allclose(fit_edmd_arrays(X, Y, ridge=0.5), expected, rtol=1e-10)

    def test_empty_pairs(self):
        with self.assertRaises(ContractError):
            fit_edmd([])

    def test_model_fit_on_linear_task(self):
        """Identity lifting on the linear toy task is exact and never pairs across demos"""
        dataset = linear_dataset()
        model = fit_model_edmd(dataset, LiftKind.IDENTITY)
        self.assertEqual(model.K.shape, (dataset.d_xi, dataset.d_xi))
        self.assertLess(model.history.losses[0], 1e-20)
        for demo in dataset.demos:
            Z = behavioral_states(demo, dataset.rescale_factor)
            np.testing.assert_allclose(Z[:-1] @ model.K.T, Z[1:], atol=1e-10)

    def test_model_fit_polynomial_width(self):
        dataset = linear_dataset(num_demos=4)
        model = fit_model_edmd(dataset, LiftKind.V2)
        self.assertEqual(model.dims.d_z, 2 * 2 + 2 * 4 + 1 + 2)

    def test_model_fit_rejects_learned_lifting(self):
        with self.assertRaises(ContractError):
            fit_model_edmd(linear_dataset(num_demos=2), LiftKind.MLP)


class TestLiftedRefit(unittest.TestCase):
    def test_state_rows_ignore_penalized_columns(self):
        """Rows that are exactly linear in the state put zero weight on the learned block"""
        rng = np.random.default_rng(8)
        A = rng.normal(scale=0.4, size=(4, 4))
        xi = rng.normal(size=(60, 4))
        learned = np.column_stack([np.maximum(xi[:, 0] - 0.2, 0.0), xi[:, 1] ** 2,
                                   xi @ np.array([0.3, -0.1, 0.2, 0.5]) + 0.7])
        X = np.hstack([xi, learned])
        Y = np.hstack([xi @ A.T, rng.normal(size=(60, 3))])
        K = fit_lifted_arrays(X, Y, num_free=4, ridge=1e-6)
        np.testing.assert_allclose(K[:4, :4], A, atol=1e-9)
        self.assertLess(np.max(np.abs(K[:4, 4:])), 1e-9)

    def test_without_penalized_columns_matches_edmd(self):
        rng = np.random.default_rng(9)
        X, Y = rng.normal(size=(40, 5)), rng.normal(size=(40, 5))
        np.testing.assert_allclose(fit_lifted_arrays(X, Y, num_free=5, ridge=1e-3), fit_edmd_arrays(X, Y),
                                   rtol=1e-9, atol=1e-12)

    def test_rejects_bad_split(self):
        with self.assertRaises(ContractError):
            fit_lifted_arrays(np.ones((3, 2)), np.ones((3, 2)), num_free=3, ridge=1e-6)
        with self.assertRaises(ContractError):
            fit_lifted_arrays(np.ones((3, 2)), np.ones((3, 3)), num_free=1, ridge=1e-6)


class TestCoherenceLoss(unittest.TestCase):
    def test_identity_on_constant_trajectory(self):
        Z = np.tile([0.3, -1.0, 2.0], (6, 1))
        self.assertEqual(coherence_loss(np.eye(3), Z, horizon=4), 0.0)

    def test_scalar_example(self):
        """K=[1], z=(1,2), H=1 gives 1"""
        self.assertEqual(coherence_loss(np.array([[1.0]]), np.array([[1.0], [2.0]]), horizon=1), 1.0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            d = int(rng.integers(1, 6))
            n = int(rng.integers(2, 12))
            horizon = int(rng.integers(1, 6))
            K = rng.normal(scale=0.6, size=(d, d))
            Z = rng.normal(size=(n, d))
            self.assertAlmostEqual(coherence_loss(K, Z, horizon), naive_coherence(K, Z, horizon),
                                   delta=1e-10 * max(1.0, naive_coherence(K, Z, horizon)), msg=f"trial {trial}")

    def test_drop_tail_mode(self):
        """Only anchors with a full horizon count"""
        rng = np.random.default_rng(4)
        K, Z = rng.normal(scale=0.5, size=(3, 3)), rng.normal(size=(9, 3))
        self.assertAlmostEqual(coherence_loss(K, Z, 3, truncate_tail=False),
                               naive_coherence(K, Z, 3, truncate_tail=False), places=10)
        with self.assertRaises(ContractError):
            coherence_loss(K, Z[:3], 3, truncate_tail=False)

    def test_too_short(self):
        with self.assertRaises(ContractError):
            coherence_loss(np.eye(2), np.zeros((1, 2)), horizon=1)

    def test_gradient_wrt_encoder_and_koopman(self):
        """The windowed training loss passes the finite-difference check for theta and K"""
        rng = np.random.default_rng(6)
        agent = KoopmanTrainerAgent(TrainConfig(detach_targets=False, lift_dim=4, hidden_widths=(5, 5)))
        encoder = SpectralEncoder(3, d_psi=4, hidden_widths=(5, 5), seed=2)
        K = gk.Parameter(np.eye(7) + 0.05 * rng.normal(size=(7, 7)))
        states = rng.normal(size=(2, 5, 3))
        error = gk.finite_diff_check([K] + encoder.params,
                                     lambda: agent._window_loss(states, None, K, encoder))
        self.assertLess(error, 1e-6)


class TestSpectralRadius(unittest.TestCase):
    def test_identity(self):
        self.assertEqual(spectral_radius(np.eye(4)), 1.0)
        self.assertEqual(spectral_radius(np.eye(4), method="power"), 1.0)

    def test_diagonal(self):
        self.assertAlmostEqual(spectral_radius(np.diag([0.5, 2.0])), 2.0, places=12)

    def test_rotation(self):
        theta = 0.7
        R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        self.assertAlmostEqual(spectral_radius(R), 1.0, places=12)
        self.assertAlmostEqual(spectral_radius(R, method="power"), 1.0, places=12)

    def test_power_matches_eigensolve_on_large_matrix(self):
        rng = np.random.default_rng(7)
        Q, _ = np.linalg.qr(rng.normal(size=(80, 80)))
        eigenvalues = np.concatenate([[2.0], rng.uniform(-1.0, 1.0, 79)])
        K = Q @ np.diag(eigenvalues) @ Q.T
        self.assertAlmostEqual(spectral_radius(K) / 2.0, 1.0, places=8)

    def test_power_only_non_convergence(self):
        with self.assertRaises(SpectralConvergenceError) as ctx:
            spectral_radius(np.diag([1.0, 0.999]), method="power", max_iter=50)
        self.assertEqual(ctx.exception.iterations, 50)
        self.assertAlmostEqual(ctx.exception.last_estimate, 1.0, places=2)

    def test_auto_falls_back_to_eigensolve(self):
        K = np.diag(np.linspace(0.999, 1.0, 70))
        self.assertAlmostEqual(spectral_radius(K, max_iter=20), 1.0, places=12)

    def test_rejects_non_square(self):
        with self.assertRaises(ContractError):
            spectral_radius(np.zeros((2, 3)))


class TestKoopmanTraining(unittest.TestCase):
    def test_identity_lifting_training_reduces_loss(self):
        dataset = linear_dataset(num_demos=4, horizon=20)
        config = TrainConfig(lift=LiftKind.IDENTITY, koopman_lr=1e-2, horizon=3, epochs=30,
                             batch_size=16, seed=1, koopman_refit=False)
        model = KoopmanTrainerAgent(config).train(dataset)
        history = model.history
        self.assertEqual(len(history.losses), 31)
        self.assertEqual(len(history.spectral_radii), 31)
        self.assertEqual(history.spectral_radii[0], 1.0)
        self.assertLess(history.losses[-1], 0.5 * history.losses[0])
        self.assertAlmostEqual(history.losses[-1],
                               evaluate_coherence(model, dataset, 3), places=12)

    def test_mlp_training_on_linear_task(self):
        """Default recipe: loss falls below 1e-3 of epoch 0 and the state rows of K become exact"""
        dataset = linear_dataset(num_demos=10, horizon=40, seed=3)
        model = KoopmanTrainerAgent(TrainConfig(epochs=10)).train(dataset)
        history = model.history
        self.assertEqual(history.spectral_radii[0], 1.0)
        self.assertLess(history.losses[-1], 1e-3 * history.losses[0])

        d_xi = dataset.d_xi
        exact = fit_model_edmd(dataset, LiftKind.IDENTITY)
        np.testing.assert_allclose(model.K[:d_xi, :d_xi], exact.K, atol=1e-6)
        self.assertLess(np.max(np.abs(model.K[:d_xi, d_xi:])), 1e-6)

        workflow = EpisodeWorkflow(model)
        self.assertGreaterEqual(success_rate(workflow.run_suite(10, seed=4)), 0.8)

    def test_refit_skipped_without_flag(self):
        """Gradient-only training moves K by a few small steps away from identity"""
        dataset = linear_dataset(num_demos=3, horizon=12)
        config = TrainConfig(lift_dim=4, hidden_widths=(6, 6), horizon=4, epochs=2, batch_size=8,
                             koopman_refit=False)
        model = KoopmanTrainerAgent(config).train(dataset)
        drift = np.max(np.abs(model.K - np.eye(model.dims.d_z)))
        self.assertGreater(drift, 0.0)
        self.assertLess(drift, 1e-2)

    def test_same_seed_is_bitwise_reproducible(self):
        dataset = linear_dataset(num_demos=3, horizon=10)
        config = TrainConfig(lift=LiftKind.MLP, lift_dim=6, hidden_widths=(8, 8), horizon=4,
                             epochs=3, batch_size=8, seed=5)
        a = KoopmanTrainerAgent(config).train(dataset)
        b = KoopmanTrainerAgent(config).train(dataset)
        self.assertEqual(a.history.losses, b.history.losses)
        np.testing.assert_array_equal(a.K, b.K)
        for wa, wb in zip(a.encoder_weights, b.encoder_weights):
            np.testing.assert_array_equal(wa, wb)
        self.assertEqual(a.dims.d_z, dataset.d_xi + 6)

    def test_frozen_identity_on_constant_latents_stays_zero(self):
        """Constant behavioral states with K frozen at I never leave zero loss"""
        demo = Demonstration(actions=np.tile([0.2, -0.1], (8, 1)), features=np.tile([1.0, 0.5], (8, 1)),
                             initial_joints=np.array([0.2, -0.1]))
        dataset = prepare_dataset(Dataset(demos=[demo, demo], d_q=2, d_f=2))
        config = TrainConfig(lift=LiftKind.MLP, lift_dim=4, hidden_widths=(6, 6), horizon=3,
                             epochs=4, batch_size=4, freeze_koopman=True)
        model = KoopmanTrainerAgent(config).train(dataset)
        self.assertTrue(all(loss <= 1e-20 for loss in model.history.losses))
        np.testing.assert_array_equal(model.K, np.eye(model.dims.d_z))

    def test_random_init_when_identity_disabled(self):
        dataset = linear_dataset(num_demos=2, horizon=8)
        config = TrainConfig(lift=LiftKind.IDENTITY, identity_init=False, horizon=2, epochs=1)
        model = KoopmanTrainerAgent(config).train(dataset)
        self.assertNotEqual(model.history.spectral_radii[0], 1.0)

    def test_requires_prepared_dataset(self):
        raw = generate_demos("linear-coupled", 2, seed=0, horizon=8, include_flow=False)
        with self.assertRaises(ContractError):
            KoopmanTrainerAgent(TrainConfig(lift=LiftKind.IDENTITY, epochs=1)).train(raw)

    def test_diverging_training_reports_snapshot(self):
        """A huge Koopman step rate blows the loss up and aborts with a snapshot"""
        dataset = linear_dataset(num_demos=2, horizon=10)
        config = TrainConfig(lift=LiftKind.IDENTITY, koopman_lr=1e150, clip_max_norm=1e300,
                             horizon=10, epochs=5, batch_size=2)
        with self.assertRaises(NonFiniteLossError) as ctx:
            KoopmanTrainerAgent(config).train(dataset)
        self.assertIn("epoch", ctx.exception.snapshot)


if __name__ == "__main__":
    unittest.main()
