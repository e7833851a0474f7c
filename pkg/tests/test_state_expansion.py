import unittest

import numpy as np

from delta_block import DeltaResidual
from state_expansion import (Compressor, CompressorMode, Expander, ExpanderMode, ExpandedDeltaResidual,
                             ExpansionError, compress_channel_axis)
from tensor_core import Linear, Tensor, backward, new_tape, no_grad, ops


class TestExpander(unittest.TestCase):

    def setUp(self):
        self.emb = Tensor(np.random.default_rng(0).standard_normal((2, 5, 4)))

    def test_repeat_copies_every_channel(self):
        with no_grad():
            X = Expander(4, 3)(self.emb).data
        self.assertEqual((2, 5, 4, 3), X.shape)
        for j in range(3):
            np.testing.assert_array_equal(self.emb.data, X[..., j])

    def test_embed_conv_starts_equal_to_repeat(self):
        with no_grad():
            conv = Expander(4, 3, ExpanderMode.EMBED_CONV, kernel_size=3)(self.emb).data
            repeat = Expander(4, 3, ExpanderMode.REPEAT)(self.emb).data
        np.testing.assert_array_equal(repeat, conv)

    def test_embed_conv_is_causal_and_indexed_by_lag(self):
        exp = Expander(4, 2, ExpanderMode.EMBED_CONV, kernel_size=2)
        exp.kernel.data[:, :, 0] = 0.0
        exp.kernel.data[:, :, 1] = 1.0
        with no_grad():
            X = exp(self.emb).data
        np.testing.assert_array_equal(np.zeros((2, 4, 2)), X[:, 0])
        np.testing.assert_array_equal(self.emb.data[:, :-1], X[:, 1:, :, 0])

    def test_invalid_sizes(self):
        with self.assertRaises(ExpansionError):
            Expander(4, 0)
        with self.assertRaises(ExpansionError):
            Expander(4, 2, ExpanderMode.EMBED_CONV, kernel_size=0)


class TestCompressor(unittest.TestCase):

    def setUp(self):
        self.X = Tensor(np.random.default_rng(1).standard_normal((2, 5, 4, 3)))

    def test_time_axis_at_init_averages_channels(self):
        with no_grad():
            x_in = Compressor(4, 3, CompressorMode.TIME_AXIS, kernel_size=4)(self.X).data
        np.testing.assert_allclose(self.X.data.mean(axis=-1), x_in, atol=1e-14)

    def test_read_init_overrides_uniform_read(self):
        with no_grad():
            x_in = Compressor(4, 3, CompressorMode.TIME_AXIS, kernel_size=1, read_init=1.0)(self.X).data
        np.testing.assert_allclose(self.X.data.sum(axis=-1), x_in, atol=1e-14)

    def test_channel_axis_uniform_kernel_equals_time_axis_identity(self):
        with no_grad():
            channel = Compressor(4, 3, CompressorMode.CHANNEL_AXIS, kernel_size=3)(self.X).data
            pooled = Compressor(4, 3, CompressorMode.TIME_AXIS, kernel_size=1)(self.X).data
        np.testing.assert_allclose(pooled, channel, atol=1e-14)

    def test_channel_axis_needs_kernel_equal_to_channels(self):
        with self.assertRaises(ExpansionError):
            Compressor(4, 3, CompressorMode.CHANNEL_AXIS, kernel_size=2)
        compressor = Compressor(4, 2, CompressorMode.CHANNEL_AXIS, kernel_size=2)
        with self.assertRaises(ExpansionError):
            compress_channel_axis(self.X, compressor)

    def test_time_axis_lag_taps_read_past_tokens(self):
        compressor = Compressor(4, 3, CompressorMode.TIME_AXIS, kernel_size=2)
        compressor.kernel.data[:, :, 0] = 0.0
        compressor.kernel.data[:, :, 1] = 1.0
        with no_grad():
            x_in = compressor(self.X).data
        np.testing.assert_array_equal(np.zeros((2, 4)), x_in[:, 0])
        np.testing.assert_allclose(self.X.data[:, :-1].mean(axis=-1), x_in[:, 1:], atol=1e-14)


class TestExpandedDeltaResidual(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.d, self.d_v = 4, 3
        self.sublayer = Linear(self.d, self.d, self.rng)
        self.X = Tensor(self.rng.standard_normal((2, 5, self.d, self.d_v)))

    def test_output_keeps_state_shape(self):
        for map_mode in ("kmap", "vmap"):
            for pool in ("compressed", "mean", "flatten"):
                block = ExpandedDeltaResidual(self.d, self.d_v, self.rng, map_mode=map_mode, direction_pool=pool)
                with no_grad():
                    self.assertEqual(self.X.shape, block(self.X, self.sublayer).shape)

    def test_gate_shared_across_channels(self):
        block = ExpandedDeltaResidual(self.d, self.d_v, self.rng, beta_init=0.3)
        with no_grad():
            block(self.X, self.sublayer)
        self.assertEqual((2, 5), block.last_beta.shape)

    def test_kmap_writes_value_along_direction(self):
        block = ExpandedDeltaResidual(self.d, self.d_v, self.rng, eps_k=0.0)
        with no_grad():
            out = block(self.X, self.sublayer).data
            x_in = block.compressor(self.X)
            k_tilde = self.sublayer(block.norm(x_in)).data
            v = x_in.data @ block.W_v.data.T
        k = k_tilde / np.linalg.norm(k_tilde, axis=-1, keepdims=True)
        np.testing.assert_allclose(v, np.einsum("bti,btij->btj", k, out), atol=1e-12)

    def test_scalar_state_equals_vector_block(self):
        vector = DeltaResidual(self.d, np.random.default_rng(5))
        vector.gate.weight.data = self.rng.standard_normal(self.d)
        expanded = ExpandedDeltaResidual(self.d, 1, np.random.default_rng(6))
        expanded.gate.weight.data = vector.gate.weight.data.copy()
        expanded.W_v.data = vector.w.data[None, :].copy()
        x = Tensor(self.rng.standard_normal((2, 5, self.d)))
        with no_grad():
            lifted = expanded(ops.unsqueeze(x, -1), self.sublayer).data[..., 0]
            plain = vector(x, self.sublayer).data
        np.testing.assert_allclose(plain, lifted, atol=1e-12)

    def test_gradients_reach_conv_kernels_and_read_vector(self):
        block = ExpandedDeltaResidual(self.d, self.d_v, self.rng, map_mode="vmap")
        block.zero_grad()
        X = Tensor(self.X.data, requires_grad=True)
        with new_tape():
            backward(ops.sum(ops.mul(block(X, self.sublayer), self.X.data)))
        for name, param in block.named_parameters():
            self.assertIsNotNone(param.grad, f"no gradient for {name}")
        self.assertIsNotNone(X.grad)

    def test_unknown_map_mode(self):
        with self.assertRaises(ExpansionError):
            ExpandedDeltaResidual(self.d, self.d_v, self.rng, map_mode="qmap")


if __name__ == "__main__":
    unittest.main()
