import math
import unittest

import numpy as np

from backbone import (AdditiveResidual, AttentionLayer, BackboneError, MlpLayer, Model, PooledAdditiveResidual,
                      SequenceOverflowError, apply_rotary, causal_mask, generate, rotary_tables, swiglu_hidden_size)
from configuration import DdlSettings, MapMode, ModelConfig, ResidualMode, Variant
from delta_block import DeltaResidual
from state_expansion import ExpandedDeltaResidual
from tensor_core import Tensor, no_grad


def toy_config(residual_mode=ResidualMode.BASELINE, **kwargs) -> ModelConfig:
    return ModelConfig(d=16, n_layers=2, n_heads=2, head_dim=8, vocab_size=256, seq_len=12,
                       residual_mode=residual_mode, **kwargs)


def reference_rms(x, scale):
    return x / np.sqrt(np.mean(x ** 2, axis=-1, keepdims=True) + 1e-6) * scale


def reference_rotate(row, position, base=10000.0):
    half = row.shape[-1] // 2
    out = np.empty_like(row)
    for i in range(half):
        angle = position / base ** (2.0 * i / row.shape[-1])
        out[i] = row[i] * math.cos(angle) - row[i + half] * math.sin(angle)
        out[i + half] = row[i] * math.sin(angle) + row[i + half] * math.cos(angle)
    return out


def reference_attention(layer, x):
    """Causal attention one query and one key at a time."""
    batch, seq, _ = x.shape
    hd = layer.head_dim
    mixed = np.zeros((batch, seq, layer.n_heads * hd))
    for b in range(batch):
        for h in range(layer.n_heads):
            cols = slice(h * hd, (h + 1) * hd)
            q = [reference_rotate(reference_rms(x[b, t] @ layer.wq.weight.data[:, cols], layer.q_norm.scale.data), t)
                 for t in range(seq)]
            k = [reference_rotate(reference_rms(x[b, t] @ layer.wk.weight.data[:, cols], layer.k_norm.scale.data), t)
                 for t in range(seq)]
            v = [x[b, t] @ layer.wv.weight.data[:, cols] for t in range(seq)]
            for t in range(seq):
                scores = [float(q[t] @ k[s]) / math.sqrt(hd) for s in range(t + 1)]
                top = max(scores)
                weights = [math.exp(score - top) for score in scores]
                total = sum(weights)
                for s in range(t + 1):
                    mixed[b, t, cols] += weights[s] / total * v[s]
    return mixed @ layer.wo.weight.data


def reference_mlp(layer, x):
    gate = x @ layer.w_gate.weight.data
    return (gate / (1.0 + np.exp(-gate)) * (x @ layer.w_up.weight.data)) @ layer.w_down.weight.data


def jitter(model, rng, scale=0.05):
    for param in model.parameters():
        param.data = param.data + scale * rng.standard_normal(param.shape)


class TestHelpers(unittest.TestCase):

    def test_swiglu_hidden_size(self):
        self.assertEqual(168, swiglu_hidden_size(64))
        self.assertEqual(2048, swiglu_hidden_size(768))
        self.assertEqual(8, swiglu_hidden_size(2))

    def test_rotary_preserves_norm_and_encodes_relative_position(self):
        cos, sin = rotary_tables(6, 4)
        rng = np.random.default_rng(0)
        q = rng.standard_normal(4)
        k = rng.standard_normal(4)
        with no_grad():
            rq = apply_rotary(Tensor(np.tile(q, (6, 1))), cos, sin).data
            rk = apply_rotary(Tensor(np.tile(k, (6, 1))), cos, sin).data
        np.testing.assert_allclose(np.linalg.norm(rq, axis=-1), np.linalg.norm(q), rtol=1e-12)
        self.assertAlmostEqual(rq[3] @ rk[1], rq[4] @ rk[2], places=12)
        np.testing.assert_allclose(q, rq[0], rtol=1e-12)

    def test_causal_mask_hides_future(self):
        mask = causal_mask(3)
        np.testing.assert_array_equal([[False, True, True], [False, False, True], [False, False, False]], mask)


class TestSublayers(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.x = self.rng.standard_normal((2, 5, 16))

    def attention(self):
        layer = AttentionLayer(16, 2, 8, 12, self.rng)
        layer.q_norm.scale.data = 1.0 + 0.1 * self.rng.standard_normal(8)
        layer.k_norm.scale.data = 1.0 + 0.1 * self.rng.standard_normal(8)
        return layer

    def test_attention_matches_loop_reference(self):
        layer = self.attention()
        with no_grad():
            out = layer(Tensor(self.x)).data
        np.testing.assert_allclose(reference_attention(layer, self.x), out, rtol=0, atol=1e-10)

    def test_single_token_attention_is_value_then_output_projection(self):
        layer = self.attention()
        x = self.x[:, :1]
        with no_grad():
            out = layer(Tensor(x)).data
        np.testing.assert_allclose(x @ layer.wv.weight.data @ layer.wo.weight.data, out, rtol=0, atol=1e-12)

    def test_zero_value_projection_silences_attention(self):
        layer = self.attention()
        layer.wv.weight.data = np.zeros_like(layer.wv.weight.data)
        with no_grad():
            np.testing.assert_array_equal(np.zeros_like(self.x), layer(Tensor(self.x)).data)

    def test_mlp_matches_swiglu_formula(self):
        layer = MlpLayer(16, self.rng)
        with no_grad():
            out = layer(Tensor(self.x)).data
        np.testing.assert_allclose(reference_mlp(layer, self.x), out, rtol=0, atol=1e-12)

    def test_mlp_maps_zero_to_zero(self):
        layer = MlpLayer(16, self.rng)
        with no_grad():
            np.testing.assert_array_equal(np.zeros((1, 3, 16)), layer(Tensor(np.zeros((1, 3, 16)))).data)
        layer.w_gate.weight.data = np.zeros_like(layer.w_gate.weight.data)
        with no_grad():
            np.testing.assert_array_equal(np.zeros_like(self.x), layer(Tensor(self.x)).data)

    def test_additive_residual_adds_sublayer_output(self):
        residual = AdditiveResidual(16)
        layer = MlpLayer(16, self.rng)
        x = Tensor(self.x)
        with no_grad():
            update = layer(residual.norm(x)).data
            out = residual(x, layer).data
        np.testing.assert_array_equal(self.x + update, out)
        np.testing.assert_allclose(update, out - self.x, rtol=0, atol=1e-12)

    def test_sublayer_parameters_do_not_depend_on_residual_mode(self):
        def shapes(model):
            layer = model.layers[0]
            return [(name, param.shape) for module in (layer.attn, layer.mlp)
                    for name, param in module.named_parameters()]

        baseline = shapes(Model(toy_config(), rng=np.random.default_rng(0)))
        for ddl in (DdlSettings(), DdlSettings(map_mode=MapMode.VMAP), DdlSettings(d_v=3)):
            self.assertEqual(baseline, shapes(Model(toy_config(ResidualMode.DDL), ddl, rng=np.random.default_rng(0))))


class TestModel(unittest.TestCase):

    def setUp(self):
        self.tokens = np.random.default_rng(1).integers(0, 256, size=(2, 12))

    def test_baseline_logits_shape_and_initial_loss(self):
        model = Model(toy_config(), rng=np.random.default_rng(0))
        with no_grad():
            logits = model(self.tokens)
            loss = model.loss(self.tokens, self.tokens).item()
        self.assertEqual((2, 12, 256), logits.shape)
        self.assertLess(abs(loss - math.log(256)), 0.5)
        self.assertIsInstance(model.layers[0].attn_residual, AdditiveResidual)
        self.assertEqual([None, None], model.mean_betas())

    def test_attention_is_causal(self):
        model = Model(toy_config(), rng=np.random.default_rng(0))
        changed = self.tokens.copy()
        changed[:, -1] = (changed[:, -1] + 1) % 256
        with no_grad():
            before = model(self.tokens).data
            after = model(changed).data
        np.testing.assert_allclose(before[:, :-1], after[:, :-1], atol=1e-12)
        self.assertFalse(np.allclose(before[:, -1], after[:, -1]))

    def test_every_residual_variant_is_causal(self):
        settings = [("baseline", toy_config(), None),
                    ("ddl kmap", toy_config(ResidualMode.DDL), DdlSettings()),
                    ("ddl vmap", toy_config(ResidualMode.DDL), DdlSettings(map_mode=MapMode.VMAP))]
        for variant in Variant:
            kernel = 3 if variant.compresses_channels else 2
            settings.append((f"d_v=3 {variant.value}", toy_config(ResidualMode.DDL),
                             DdlSettings(d_v=3, variant=variant, state_shortconv_kernel_size=kernel,
                                         input_embed_shortconv_kernel_size=2)))
        position = 5
        changed = self.tokens.copy()
        changed[:, position] = (changed[:, position] + 7) % 256
        for name, config, ddl in settings:
            model = Model(config, ddl, rng=np.random.default_rng(0))
            jitter(model, np.random.default_rng(1))
            with no_grad():
                before = model(self.tokens).data
                after = model(changed).data
            np.testing.assert_allclose(before[:, :position], after[:, :position], rtol=0, atol=1e-12, err_msg=name)
            self.assertFalse(np.allclose(before[:, position:], after[:, position:]), name)

    def test_two_layer_baseline_matches_hand_composed_forward(self):
        model = Model(toy_config(), rng=np.random.default_rng(0))
        jitter(model, np.random.default_rng(2))
        tokens = self.tokens[:, :6]
        x = model.embedding.data[tokens]
        for layer in model.layers:
            x = x + reference_attention(layer.attn, reference_rms(x, layer.attn_residual.norm.scale.data))
            x = x + reference_mlp(layer.mlp, reference_rms(x, layer.mlp_residual.norm.scale.data))
        expected = reference_rms(x, model.final_norm.scale.data) @ model.head.weight.data
        with no_grad():
            logits = model(tokens).data
        np.testing.assert_allclose(expected, logits, rtol=0, atol=1e-10)

    def test_ddl_vector_stream_uses_delta_blocks(self):
        model = Model(toy_config(ResidualMode.DDL), DdlSettings(beta_init=0.4), rng=np.random.default_rng(0))
        self.assertIsInstance(model.layers[0].mlp_residual, DeltaResidual)
        with no_grad():
            model(self.tokens)
        betas = model.mean_betas()
        self.assertEqual(2, len(betas))
        for beta in betas:
            self.assertAlmostEqual(0.4, beta, places=6)

    def test_expanded_variants_build_and_run(self):
        for variant in Variant:
            kernel = 3 if variant.compresses_channels else 2
            for map_mode in MapMode:
                ddl = DdlSettings(d_v=3, variant=variant, map_mode=map_mode, state_shortconv_kernel_size=kernel,
                                  input_embed_shortconv_kernel_size=2)
                model = Model(toy_config(ResidualMode.DDL), ddl, rng=np.random.default_rng(0))
                self.assertIsInstance(model.layers[1].attn_residual, ExpandedDeltaResidual)
                self.assertEqual(variant.expands_embedding, model.expander.kernel is not None)
                with no_grad():
                    logits = model(self.tokens[:, :6])
                self.assertEqual((2, 6, 256), logits.shape)
                self.assertTrue(np.all(np.isfinite(logits.data)))

    def test_expanded_stream_without_delta_on_mlp(self):
        ddl = DdlSettings(d_v=2, apply_to_mlp=False)
        model = Model(toy_config(ResidualMode.DDL), ddl, rng=np.random.default_rng(0))
        self.assertIsInstance(model.layers[0].mlp_residual, PooledAdditiveResidual)
        with no_grad():
            model(self.tokens)
        self.assertEqual(2, len(model.layer_betas()))

    def test_zero_gate_override_makes_ddl_stack_pass_embeddings_through(self):
        model = Model(toy_config(ResidualMode.DDL), DdlSettings(), rng=np.random.default_rng(0))
        with no_grad():
            logits = model(self.tokens, beta_override=0.0).data
            expected = model.logits_from_stream(model.embed(self.tokens)).data
        np.testing.assert_allclose(expected, logits, atol=1e-12)

    def test_tied_embeddings_have_no_head(self):
        model = Model(toy_config(tie_embeddings=True), rng=np.random.default_rng(0))
        self.assertIsNone(model.head)
        self.assertNotIn("head.weight", dict(model.named_parameters()))

    def test_sequence_overflow(self):
        model = Model(toy_config(), rng=np.random.default_rng(0))
        with self.assertRaises(SequenceOverflowError):
            model(np.zeros((1, 13), dtype=np.int64))
        with self.assertRaises(BackboneError):
            model(np.zeros(5, dtype=np.int64))

    def test_same_seed_builds_identical_models(self):
        first = Model(toy_config(ResidualMode.DDL), DdlSettings(d_v=2), rng=np.random.default_rng(4))
        second = Model(toy_config(ResidualMode.DDL), DdlSettings(d_v=2), rng=np.random.default_rng(4))
        for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_generate_is_greedy_and_bounded(self):
        model = Model(toy_config(), rng=np.random.default_rng(0))
        out = generate(model, [104, 105], max_new_tokens=15)
        self.assertEqual(17, len(out))
        self.assertEqual([104, 105], out[:2])
        self.assertEqual(out, generate(model, [104, 105], max_new_tokens=15))
        with self.assertRaises(BackboneError):
            generate(model, [], 3)


if __name__ == "__main__":
    unittest.main()
