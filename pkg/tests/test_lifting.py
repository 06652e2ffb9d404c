# tests/test_lifting.py
import unittest

import numpy as np

from models.koopman_models import LiftKind
from tools.lifting import (
    SpectralEncoder,
    assemble_latent,
    encode,
    extract_action,
    feature_slice,
    latent_dim,
    lift,
    lift_states,
    lifted_dim,
)
from utils.errors import ContractError

# (n_h, n_o) -> (v1, v2, v3)
DIMENSION_TABLE = {
    (28, 128): (846, 718, 1030),
    (26, 256): (1171, 915, 1479),
    (24, 256): (1116, 860, 1420),
    (30, 256): (1293, 1037, 1609),
}


class TestLiftedDim(unittest.TestCase):
    def test_dimension_table(self):
        """Every published task/variant width is reproduced"""
        for (n_h, n_o), expected in DIMENSION_TABLE.items():
            got = tuple(lifted_dim(n_h, n_o, v) for v in (LiftKind.V1, LiftKind.V2, LiftKind.V3))
            self.assertEqual(got, expected, f"n_h={n_h}, n_o={n_o}")

    def test_small_case(self):
        """(2, 2, v2) has 11 terms"""
        self.assertEqual(lifted_dim(2, 2, LiftKind.V2), 11)

    def test_rejects_empty_blocks(self):
        with self.assertRaises(ContractError):
            lifted_dim(0, 3, LiftKind.V2)

    def test_rejects_learned_lifting(self):
        with self.assertRaises(ContractError):
            lifted_dim(2, 2, LiftKind.MLP)


class TestLift(unittest.TestCase):
    def test_v2_golden_vector(self):
        """x_h=(1,2), x_o=(0,1) evaluates term by term"""
        out = lift(np.array([1.0, 2.0]), np.array([0.0, 1.0]), LiftKind.V2)
        # [x_h | x_h^2 | x_o | x_o^2 | x_h0*x_h1 | x_h^3]
        np.testing.assert_array_equal(out, [1, 2, 1, 4, 0, 1, 0, 1, 2, 1, 8])

    def test_v1_golden_vector(self):
        out = lift(np.array([1.0, 2.0]), np.array([0.0, 1.0]), LiftKind.V1)
        np.testing.assert_array_equal(out, [1, 2, 1, 4, 0, 1, 0, 1, 0, 1, 2, 1, 8])

    def test_pairwise_order_is_lexicographic(self):
        """Pairs run (0,1), (0,2), (1,2)"""
        out = lift(np.array([2.0, 3.0, 5.0]), np.array([1.0]), LiftKind.V2)
        pairwise = out[3 + 3 + 1 + 1: 3 + 3 + 1 + 1 + 3]
        np.testing.assert_array_equal(pairwise, [6.0, 10.0, 15.0])

    def test_v3_at_zero(self):
        """Polynomial blocks vanish; cosines are one and sines zero"""
        n_h, n_o = 3, 4
        out = lift(np.zeros(n_h), np.zeros(n_o), LiftKind.V3)
        v2 = lifted_dim(n_h, n_o, LiftKind.V2)
        np.testing.assert_array_equal(out[:v2], np.zeros(v2))
        trig = np.concatenate([np.ones(n_h), np.zeros(n_h), np.ones(n_o), np.zeros(n_o)])
        np.testing.assert_array_equal(out[v2:], trig)

    def test_length_matches_lifted_dim(self):
        rng = np.random.default_rng(0)
        for variant in (LiftKind.V1, LiftKind.V2, LiftKind.V3):
            for n_h, n_o in ((1, 1), (3, 5), (7, 2)):
                out = lift(rng.normal(size=n_h), rng.normal(size=n_o), variant)
                self.assertEqual(out.shape, (lifted_dim(n_h, n_o, variant),))

    def test_batched_rows_match_single(self):
        """A row-stacked batch lifts each row independently"""
        rng = np.random.default_rng(1)
        x_h, x_o = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        batch = lift(x_h, x_o, LiftKind.V3)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], lift(x_h[i], x_o[i], LiftKind.V3))

    def test_batch_shape_mismatch(self):
        with self.assertRaises(ContractError):
            lift(np.zeros((3, 2)), np.zeros((4, 2)), LiftKind.V2)


class TestSpectralEncoder(unittest.TestCase):
    def test_default_output_width(self):
        """A d_xi vector maps to 256 outputs under default widths"""
        encoder = SpectralEncoder(6, seed=0)
        self.assertEqual(encode(np.ones(6), encoder).shape, (256,))

    def test_zero_weights_return_final_bias(self):
        encoder = SpectralEncoder(4, d_psi=5, hidden_widths=(3, 3), seed=0)
        for param in encoder.params:
            param.value[...] = 0.0
        encoder.params[-1].value[...] = np.arange(5.0)
        for xi in (np.zeros(4), np.array([1.0, -2.0, 3.0, 0.5])):
            np.testing.assert_array_equal(encode(xi, encoder), np.arange(5.0))

    def test_seeded_init_is_deterministic(self):
        xi = np.array([0.1, -0.3, 0.7])
        a = SpectralEncoder(3, d_psi=16, hidden_widths=(8, 8), seed=42)
        b = SpectralEncoder(3, d_psi=16, hidden_widths=(8, 8), seed=42)
        np.testing.assert_array_equal(a.forward(xi), b.forward(xi))

    def test_weights_round_trip(self):
        encoder = SpectralEncoder(3, d_psi=7, hidden_widths=(4, 5), seed=3)
        restored = SpectralEncoder.from_weights(encoder.weights())
        self.assertEqual(restored.widths, encoder.widths)
        xi = np.array([0.2, 0.4, -1.0])
        np.testing.assert_array_equal(restored.forward(xi), encoder.forward(xi))

    def test_graph_pass_matches_numpy_pass(self):
        encoder = SpectralEncoder(3, d_psi=6, hidden_widths=(5, 4), seed=7)
        xi = np.random.default_rng(2).normal(size=(4, 3))
        np.testing.assert_allclose(encoder.forward_graph(xi).value, encoder.forward(xi), atol=1e-14)

    def test_width_mismatch(self):
        with self.assertRaises(ContractError):
            SpectralEncoder(3, seed=0).forward(np.zeros(4))


class TestLatentAssembly(unittest.TestCase):
    def test_assemble(self):
        np.testing.assert_array_equal(assemble_latent(np.array([1.0, 2.0]), np.array([3.0])), [1, 2, 3])

    def test_extract_action(self):
        np.testing.assert_array_equal(extract_action(np.array([1.0, 2.0, 3.0, 4.0]), 2), [1, 2])

    def test_state_inclusion(self):
        """The first d_xi latent entries are the behavioral state; the first d_q are the action"""
        encoder = SpectralEncoder(5, d_psi=9, hidden_widths=(4, 4), seed=1)
        xi = np.array([0.3, -0.1, 1.0, 2.0, 3.0])
        z = assemble_latent(xi, encode(xi, encoder))
        self.assertEqual(z.shape, (14,))
        np.testing.assert_array_equal(z[:5], xi)
        np.testing.assert_array_equal(extract_action(z, 2), xi[:2])

    def test_extract_beyond_width(self):
        with self.assertRaises(ContractError):
            extract_action(np.zeros(3), 4)

    def test_lift_states_and_latent_dim_agree(self):
        """Every lifting kind produces latents of the advertised width"""
        rng = np.random.default_rng(4)
        d_q, d_f, d_g = 2, 3, 2
        states = rng.normal(size=(6, d_q + d_f + d_g))
        encoder = SpectralEncoder(d_q + d_f + d_g, d_psi=10, hidden_widths=(4, 4), seed=0)
        for kind in LiftKind:
            latents = lift_states(kind, states, d_q, encoder)
            self.assertEqual(latents.shape, (6, latent_dim(kind, d_q, d_f, d_g, d_psi=10)), kind.value)
            sl = feature_slice(kind, d_q, d_f)
            np.testing.assert_array_equal(latents[:, sl], states[:, d_q:d_q + d_f])

    def test_mlp_lifting_needs_encoder(self):
        with self.assertRaises(ContractError):
            lift_states(LiftKind.MLP, np.zeros((2, 4)), 2)


if __name__ == "__main__":
    unittest.main()
