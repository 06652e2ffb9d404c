# tests/test_flow_codec.py
import unittest

import numpy as np

from agents.flow_ae_trainer import FlowAETrainerAgent, train_flow_ae
from synthbench.demos import generate_demos
from models.trajectory_models import Dataset, Demonstration
from synthbench.toy_env import flow_points_at
from tools import gradkit as gk
from tools.flow_codec import (
    LATENT_DIM,
    FlowCodec,
    decode_flow,
    decode_points,
    encode_dataset,
    encode_flow,
    flow_centroid,
    grid_from_points,
    points_from_grid,
    pooled_grids,
    reconstruction_rmse,
)
from utils.errors import ContractError


def naive_conv(x, w, b, stride, padding):
    """Direct quadruple loop over (out channel, row, col, in channel)"""
    c_in, h, width = x.shape
    out_channels, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (width + 2 * padding - kw) // stride + 1
    out = np.zeros((out_channels, ho, wo))
    for o in range(out_channels):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    acc += np.sum(w[o, c] * xp[c, i * stride:i * stride + kh, j * stride:j * stride + kw])
                out[o, i, j] = acc
    return out


def naive_conv_transpose(x, w, b, stride, padding, output_padding):
    """Scatter every input pixel through the kernel, then crop the padding"""
    c_in, h, width = x.shape
    _, out_channels, kh, kw = w.shape
    full = np.zeros((out_channels, (h - 1) * stride + kh + output_padding,
                     (width - 1) * stride + kw + output_padding))
    for c in range(c_in):
        for i in range(h):
            for j in range(width):
                for o in range(out_channels):
                    full[o, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[c, i, j] * w[c, o]
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (width - 1) * stride - 2 * padding + kw + output_padding
    return full[:, padding:padding + ho, padding:padding + wo] + b[:, None, None]


def translation_frames(count, seed=0):
    rng = np.random.default_rng(seed)
    return np.stack([flow_points_at(rng.uniform(0.2, 0.8, 2)) for _ in range(count)])


class TestGridLayout(unittest.TestCase):
    def test_first_point(self):
        points = np.zeros((256, 2))
        points[0] = (5.0, 7.0)
        grid = grid_from_points(points)
        self.assertEqual(grid.shape, (2, 16, 16))
        self.assertEqual((grid[0, 0, 0], grid[1, 0, 0]), (5.0, 7.0))

    def test_row_major_index(self):
        """Point 17 lands at row 1, column 1"""
        points = np.zeros((256, 2))
        points[17] = (3.0, 4.0)
        grid = grid_from_points(points)
        self.assertEqual((grid[0, 1, 1], grid[1, 1, 1]), (3.0, 4.0))
        self.assertEqual(np.count_nonzero(grid), 2)

    def test_bijection(self):
        points = np.random.default_rng(0).uniform(0, 128, (256, 2))
        np.testing.assert_array_equal(points_from_grid(grid_from_points(points)), points)

    def test_wrong_count(self):
        with self.assertRaises(ContractError):
            grid_from_points(np.zeros((255, 2)))


class TestCodecForward(unittest.TestCase):
    def setUp(self):
        self.codec = FlowCodec(seed=3)
        self.grid = grid_from_points(flow_points_at(np.array([0.4, 0.6])))

    def test_encode_matches_direct_convolution(self):
        c = self.codec
        hidden = naive_conv(self.grid, c.enc_w1.value, c.enc_b1.value, stride=2, padding=1)
        expected = naive_conv(hidden, c.enc_w2.value, c.enc_b2.value, stride=1, padding=0)
        latent = encode_flow(self.grid, c)
        self.assertEqual(latent.shape, (2, 8, 8))
        np.testing.assert_allclose(latent, expected, rtol=0, atol=1e-10)

    def test_decode_matches_direct_transposed_convolution(self):
        c = self.codec
        latent = np.random.default_rng(1).normal(size=(2, 8, 8))
        hidden = naive_conv_transpose(latent, c.dec_w1.value, c.dec_b1.value, 1, 0, 0)
        expected = np.maximum(naive_conv_transpose(hidden, c.dec_w2.value, c.dec_b2.value, 2, 1, 1), 0.0)
        np.testing.assert_allclose(decode_flow(latent, c), expected, rtol=0, atol=1e-10)

    def test_zero_grid_and_biases_give_zero_latent(self):
        for p in (self.codec.enc_b1, self.codec.enc_b2):
            p.value[...] = 0.0
        np.testing.assert_array_equal(encode_flow(np.zeros((2, 16, 16)), self.codec), np.zeros((2, 8, 8)))

    def test_zero_latent_and_biases_give_zero_grid(self):
        for p in (self.codec.dec_b1, self.codec.dec_b2):
            p.value[...] = 0.0
        np.testing.assert_array_equal(decode_flow(np.zeros(LATENT_DIM), self.codec), np.zeros((2, 16, 16)))

    def test_decoder_output_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            grid = decode_flow(rng.normal(scale=50.0, size=(2, 8, 8)), self.codec)
            self.assertEqual(grid.shape, (2, 16, 16))
            self.assertGreaterEqual(grid.min(), 0.0)

    def test_flat_and_batched_latents(self):
        latents = np.random.default_rng(4).normal(size=(3, 2, 8, 8))
        batched = decode_flow(latents, self.codec)
        self.assertEqual(batched.shape, (3, 2, 16, 16))
        np.testing.assert_array_equal(decode_flow(latents[1].reshape(LATENT_DIM), self.codec), batched[1])
        self.assertEqual(decode_points(latents[0].reshape(-1), self.codec).shape, (256, 2))

    def test_bad_latent_shape(self):
        with self.assertRaises(ContractError):
            decode_flow(np.zeros((2, 4, 4)), self.codec)

    def test_weights_round_trip(self):
        restored = FlowCodec.from_weights(self.codec.weights())
        np.testing.assert_array_equal(encode_flow(self.grid, restored), encode_flow(self.grid, self.codec))

    def test_reconstruction_gradient(self):
        """Reconstruction loss gradient passes the finite-difference check"""
        grids = np.stack([grid_from_points(f) for f in translation_frames(2, seed=5)])
        self.codec.fit_output_layer(grids)
        error = gk.finite_diff_check(self.codec.params, lambda: self.codec.reconstruction_loss(grids))
        self.assertLess(error, 1e-6)


class TestFlowDatasets(unittest.TestCase):
    def make_dataset(self, frames=3):
        demos = []
        for seed in range(2):
            flow = translation_frames(frames, seed=seed)
            demos.append(Demonstration(actions=np.zeros((frames, 2)), features=np.ones((frames, 4)),
                                       initial_joints=np.zeros(2), flow_points=flow))
        return Dataset(demos=demos, d_q=2, d_f=4)

    def test_pooled_grids(self):
        grids = pooled_grids(self.make_dataset())
        self.assertEqual(grids.shape, (6, 2, 16, 16))

    def test_encode_dataset_replaces_features(self):
        dataset = self.make_dataset()
        codec = FlowCodec(seed=0)
        encoded = encode_dataset(dataset, codec)
        self.assertEqual(encoded.d_f, LATENT_DIM)
        demo = encoded.demos[1]
        self.assertEqual(demo.features.shape, (3, LATENT_DIM))
        expected = encode_flow(grid_from_points(dataset.demos[1].flow_points[2]), codec).reshape(-1)
        np.testing.assert_array_equal(demo.features[2], expected)
        np.testing.assert_array_equal(demo.actions, dataset.demos[1].actions)

    def test_encode_dataset_without_flow(self):
        dataset = Dataset(demos=[Demonstration(actions=np.zeros((2, 2)), features=np.ones((2, 2)),
                                               initial_joints=np.zeros(2))], d_q=2, d_f=2)
        with self.assertRaises(ContractError):
            encode_dataset(dataset, FlowCodec())

    def test_centroid(self):
        points = flow_points_at(np.array([0.5, 0.25]))
        np.testing.assert_allclose(flow_centroid(points), [16 + 96 * 0.5, 16 + 96 * 0.25], atol=1e-9)


class TestFlowAETraining(unittest.TestCase):
    def test_training_reduces_loss(self):
        """Rigid-translation frames: loss falls well below its starting value"""
        frames = translation_frames(20, seed=7)
        grids = np.stack([grid_from_points(f) for f in frames])
        agent = FlowAETrainerAgent(learning_rate=1e-2, epochs=150, lr_decay=0.99, batch_size=10, seed=0)
        codec = agent.train(grids, codec=FlowCodec(seed=0))
        self.assertEqual(len(agent.losses), 151)
        self.assertLess(agent.losses[-1], agent.losses[0])
        self.assertLess(agent.losses[-1], 0.1 * agent.losses[0])
        self.assertAlmostEqual(reconstruction_rmse(codec, frames) ** 2 * 256, agent.losses[-1], places=6)

    def test_default_recipe_below_one_pixel(self):
        """Frames pooled from five demos reconstruct to under a pixel with default settings"""
        dataset = generate_demos("linear-coupled", 5, seed=11, horizon=40)
        frames = np.concatenate([demo.flow_points for demo in dataset.demos])[:200]
        grids = np.stack([grid_from_points(f) for f in frames])
        agent = FlowAETrainerAgent()
        codec = agent.train(grids)
        self.assertLess(reconstruction_rmse(codec, frames), 1.0)
        self.assertLessEqual(agent.losses[-1], agent.losses[0] + 1e-6)
        recon = decode_flow(encode_flow(grids[:5], codec), codec)
        self.assertTrue(np.all(recon >= 0))

    def test_output_layer_fit_is_exact_on_rigid_translations(self):
        """Pass-through init plus the closed-form output layer reproduces translated lattices"""
        frames = translation_frames(12, seed=3)
        grids = np.stack([grid_from_points(f) for f in frames])
        codec = FlowCodec(seed=2, dirac=True)
        codec.fit_output_layer(grids)
        self.assertLess(reconstruction_rmse(codec, frames), 1e-6)
        held_out = translation_frames(4, seed=8)
        self.assertLess(reconstruction_rmse(codec, held_out), 1e-6)

    def test_output_layer_fit_needs_frames(self):
        with self.assertRaises(ContractError):
            FlowCodec().fit_output_layer(np.zeros((0, 2, 16, 16)))

    def test_seeded_training_is_reproducible(self):
        grids = np.stack([grid_from_points(f) for f in translation_frames(4, seed=1)])
        a = train_flow_ae(grids, epochs=3, batch_size=2, seed=9)
        b = train_flow_ae(grids, epochs=3, batch_size=2, seed=9)
        for wa, wb in zip(a.weights(), b.weights()):
            np.testing.assert_array_equal(wa, wb)

    def test_needs_frames(self):
        with self.assertRaises(ContractError):
            FlowAETrainerAgent(epochs=1).train(np.zeros((0, 2, 16, 16)))


if __name__ == "__main__":
    unittest.main()
