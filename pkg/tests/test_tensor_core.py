import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tensor_core import (Linear, Parameter, RMSNorm, ShapeError, NonFiniteError, TapeError, Tensor, backward,
                         default_dtype, get_default_dtype, new_tape, no_grad, ops, set_debug)


def numeric_grad(fn, tensor: Tensor, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(tensor.data)
    for index in np.ndindex(tensor.shape):
        original = tensor.data[index]
        tensor.data[index] = original + h
        plus = fn()
        tensor.data[index] = original - h
        minus = fn()
        tensor.data[index] = original
        grad[index] = (plus - minus) / (2 * h)
    return grad


def tape_grad(build, *leaves: Tensor):
    for leaf in leaves:
        leaf.zero_grad()
    with new_tape():
        backward(build())
    return [leaf.grad for leaf in leaves]


class TestOps(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(3)

    def assertGradMatches(self, build, leaf: Tensor, tolerance: float = 1e-6):
        (analytic,) = tape_grad(build, leaf)

        def value():
            with no_grad():
                return build().item()

        np.testing.assert_allclose(analytic, numeric_grad(value, leaf), rtol=tolerance, atol=tolerance)

    def test_matmul_gradient_batched(self):
        a = Tensor(self.rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(self.rng.standard_normal((4, 5)), requires_grad=True)
        self.assertGradMatches(lambda: ops.sum(ops.tanh(ops.matmul(a, b))), a)
        self.assertGradMatches(lambda: ops.sum(ops.tanh(ops.matmul(a, b))), b)

    def test_matvec_gradient(self):
        a = Tensor(self.rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(self.rng.standard_normal(4), requires_grad=True)
        self.assertGradMatches(lambda: ops.sum(ops.sigmoid(ops.matmul(a, w))), w)

    def test_broadcast_gradient_is_reduced_to_input_shape(self):
        x = Tensor(self.rng.standard_normal((2, 3, 4)), requires_grad=True)
        scale = Tensor(self.rng.standard_normal(4), requires_grad=True)
        (grad,) = tape_grad(lambda: ops.sum(ops.mul(x, scale)), scale)
        self.assertEqual((4,), grad.shape)
        np.testing.assert_allclose(grad, x.data.sum(axis=(0, 1)))

    def test_softmax_and_log_softmax_gradients(self):
        x = Tensor(self.rng.standard_normal((3, 5)), requires_grad=True)
        weights = self.rng.standard_normal((3, 5))
        self.assertGradMatches(lambda: ops.sum(ops.mul(ops.softmax(x), weights)), x)
        self.assertGradMatches(lambda: ops.sum(ops.mul(ops.log_softmax(x), weights)), x)

    def test_cross_entropy_matches_manual_value_and_gradient(self):
        logits = Tensor(self.rng.standard_normal((2, 3, 7)), requires_grad=True)
        targets = self.rng.integers(0, 7, size=(2, 3))
        log_probs = logits.data - np.log(np.exp(logits.data).sum(-1, keepdims=True))
        expected = -np.take_along_axis(log_probs, targets[..., None], -1).mean()
        with no_grad():
            self.assertAlmostEqual(expected, ops.cross_entropy(logits, targets).item(), places=12)
        self.assertGradMatches(lambda: ops.cross_entropy(logits, targets), logits)

    def test_cross_entropy_rejects_mismatched_targets(self):
        with self.assertRaises(ShapeError):
            ops.cross_entropy(Tensor(np.zeros((2, 3, 4))), np.zeros((2, 4), dtype=np.int64))

    def test_shift_delays_and_zero_fills(self):
        x = Tensor(np.arange(1.0, 6.0).reshape(1, 5), requires_grad=True)
        shifted = ops.shift(x, 2, axis=1)
        np.testing.assert_array_equal([[0.0, 0.0, 1.0, 2.0, 3.0]], shifted.data)
        (grad,) = tape_grad(lambda: ops.sum(ops.mul(ops.shift(x, 2, axis=1), np.arange(5.0))), x)
        np.testing.assert_array_equal([[2.0, 3.0, 4.0, 0.0, 0.0]], grad)

    def test_getitem_slice_and_fancy_index_gradients(self):
        x = Tensor(self.rng.standard_normal((4, 6)), requires_grad=True)
        (grad,) = tape_grad(lambda: ops.sum(x[..., :3]), x)
        np.testing.assert_array_equal(np.concatenate([np.ones((4, 3)), np.zeros((4, 3))], axis=1), grad)
        (grad,) = tape_grad(lambda: ops.sum(ops.getitem(x, (np.array([0, 0, 2]),))), x)
        np.testing.assert_array_equal([2.0, 0.0, 1.0, 0.0], grad[:, 0])

    def test_embedding_accumulates_repeated_rows(self):
        weight = Parameter(self.rng.standard_normal((5, 3)))
        (grad,) = tape_grad(lambda: ops.sum(ops.embedding(weight, np.array([[1, 1, 4]]))), weight)
        np.testing.assert_array_equal([0.0, 2.0, 0.0, 0.0, 1.0], grad[:, 0])

    def test_embedding_rejects_out_of_range_index(self):
        with self.assertRaises(ShapeError):
            ops.embedding(Parameter(np.zeros((4, 2))), np.array([4]))

    def test_masked_fill_blocks_gradient(self):
        x = Tensor(self.rng.standard_normal((3, 3)), requires_grad=True)
        mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
        (grad,) = tape_grad(lambda: ops.sum(ops.masked_fill(x, mask, 0.0)), x)
        np.testing.assert_array_equal((~mask).astype(float), grad)

    def test_incompatible_shapes_raise_shape_error(self):
        with self.assertRaises(ShapeError):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_astype_roundtrips_gradient_dtype(self):
        x = Tensor(self.rng.standard_normal(3), requires_grad=True, dtype=np.float32)
        (grad,) = tape_grad(lambda: ops.sum(ops.mul(ops.astype(x, np.float64), 2.0)), x)
        self.assertEqual(np.float32, grad.dtype)
        np.testing.assert_array_equal(np.full(3, 2.0, dtype=np.float32), grad)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
    def test_softmax_rows_sum_to_one(self, values):
        with no_grad():
            out = ops.softmax(Tensor(values)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-12)
        self.assertTrue(np.all(out >= 0.0))


class TestTape(unittest.TestCase):

    def test_fan_out_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        (grad,) = tape_grad(lambda: ops.sum(ops.add(ops.mul(x, x), x)), x)
        np.testing.assert_allclose(2 * x.data + 1, grad)

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with new_tape():
                backward(ops.sum(ops.mul(x, 3.0)))
        np.testing.assert_array_equal([6.0, 6.0], x.grad)

    def test_backward_frees_the_tape(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with new_tape() as tape:
            loss = ops.sum(ops.mul(x, x))
            self.assertGreater(len(tape), 0)
            backward(loss)
            self.assertEqual(0, len(tape))
        with self.assertRaises(TapeError):
            backward(loss)

    def test_retained_tape_can_be_replayed(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with new_tape():
            loss = ops.sum(ops.mul(x, x))
            backward(loss, retain_tape=True)
            backward(loss)
        np.testing.assert_array_equal([8.0], x.grad)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with new_tape() as tape, no_grad():
            ops.mul(x, x)
        self.assertEqual(0, len(tape))

    def test_detached_tensor_receives_no_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        detached = x.detach()
        (grad,) = tape_grad(lambda: ops.sum(ops.mul(x, detached)), x)
        np.testing.assert_array_equal(detached.data, grad)
        self.assertIsNone(detached.grad)

    def test_backward_requires_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with new_tape():
            with self.assertRaises(ShapeError):
                backward(ops.mul(x, 2.0))

    def test_debug_mode_rejects_non_finite_inputs(self):
        set_debug(True)
        try:
            with self.assertRaises(NonFiniteError):
                ops.exp(Tensor(np.array([np.nan])))
        finally:
            set_debug(False)
        self.assertTrue(np.isnan(ops.exp(Tensor(np.array([np.nan]))).data[0]))


class TestModules(unittest.TestCase):

    def test_default_dtype_scope(self):
        previous = get_default_dtype()
        with default_dtype("float32"):
            layer = Linear(3, 2, np.random.default_rng(0))
        self.assertEqual(np.float32, layer.weight.dtype)
        self.assertIs(previous, get_default_dtype())

    def test_rms_norm_output_has_unit_rms(self):
        norm = RMSNorm(8)
        x = Tensor(np.random.default_rng(1).standard_normal((4, 8)) * 5.0)
        with no_grad():
            out = norm(x).data
        np.testing.assert_allclose(np.sqrt(np.mean(out ** 2, axis=-1)), 1.0, rtol=1e-5)

    def test_norm_scale_is_excluded_from_decay(self):
        self.assertFalse(RMSNorm(4).scale.decay)
        self.assertTrue(Linear(4, 4, np.random.default_rng(0)).weight.decay)

    def test_load_state_dict_rejects_missing_and_misshapen(self):
        layer = Linear(3, 2, np.random.default_rng(0), bias=True)
        with self.assertRaises(KeyError):
            layer.load_state_dict({"weight": np.zeros((3, 2))})
        with self.assertRaises(ValueError):
            layer.load_state_dict({"weight": np.zeros((2, 3)), "bias": np.zeros(2)})
        layer.load_state_dict({"weight": np.ones((3, 2)), "bias": np.zeros(2)})
        np.testing.assert_array_equal(np.ones((3, 2)), layer.weight.data)

    def test_linear_init_scale(self):
        plain = Linear(16, 4, np.random.default_rng(5))
        scaled = Linear(16, 4, np.random.default_rng(5), init_scale=0.1)
        np.testing.assert_allclose(0.1 * plain.weight.data, scaled.weight.data)


if __name__ == "__main__":
    unittest.main()
