import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cromotex.gradcheck import TINY_ENCODER
from cromotex.model import (
    PARTS, EncoderConfig, FrozenParameterError, ModelParams, classifier_forward, ecg_encoder_forward, init_params,
    model_backward, parameter_count, projection_forward, teacher_forward,
)
from cromotex.optim import OptimizerState, adaptive_moment_step

# Pinned once from the reference forward pass: zero input, zero biases, unit batch norm.
ZERO_INPUT_GOLDEN = np.array([
    0.17567764104880484, 0.08662325411747833, -0.23126777915532015, 1.2577586451473879,
    0.1113651133052533, 0.3028301417147655, -0.8183110763391322, -0.8846759398392378,
])


def _x(rng, b, cfg=TINY_ENCODER):
    return rng.standard_normal((b, cfg.in_leads, cfg.input_length))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=10, num_heads=3)
        with pytest.raises(ValueError):
            EncoderConfig(classifier_dropout=1.0)
        with pytest.raises(ValueError):
            EncoderConfig(num_layers=0)

    def test_full_size_sequence_length(self):
        assert EncoderConfig().seq_len == 196
        assert TINY_ENCODER.seq_len == 20


class TestEncoder:
    def test_zero_input_golden(self):
        params = init_params(TINY_ENCODER, 0)
        out, _ = ecg_encoder_forward(params, np.zeros((3, 12, 24)), TINY_ENCODER, "eval")
        for row in out:
            assert_allclose(row, ZERO_INPUT_GOLDEN, rtol=0, atol=1e-12)

    def test_full_size_output_shape(self):
        cfg = EncoderConfig()
        params = init_params(cfg, 0, dtype=np.float32)
        out, _ = ecg_encoder_forward(params, np.zeros((2, 12, 1000), np.float32), cfg)
        assert out.shape == (2, 256)

    def test_eval_determinism_and_order_independence(self):
        rng = np.random.default_rng(1)
        params = init_params(TINY_ENCODER, 3)
        a, b = _x(rng, 4), _x(rng, 4)
        first, _ = ecg_encoder_forward(params, a, TINY_ENCODER)
        ecg_encoder_forward(params, b, TINY_ENCODER)
        again, _ = ecg_encoder_forward(params, a, TINY_ENCODER)
        assert first.tobytes() == again.tobytes()
        # eval mode is per-row: a batch equals its rows run separately
        single = np.concatenate([ecg_encoder_forward(params, a[i:i + 1], TINY_ENCODER)[0] for i in range(4)])
        assert_allclose(single, first, atol=1e-12)

    def test_shape_errors(self):
        params = init_params(TINY_ENCODER, 0)
        with pytest.raises(ValueError):
            ecg_encoder_forward(params, np.zeros((2, 11, 24)), TINY_ENCODER)
        with pytest.raises(ValueError):
            ecg_encoder_forward(params, np.zeros((2, 12, 24)), TINY_ENCODER, mode="test")

    def test_nonfinite_names_layer(self):
        params = init_params(TINY_ENCODER, 0)
        x = np.zeros((2, 12, 24))
        x[0, 0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="conv1"):
            ecg_encoder_forward(params, x, TINY_ENCODER)

    def test_train_mode_updates_batch_norm_buffers(self):
        params = init_params(TINY_ENCODER, 0)
        _, cache = ecg_encoder_forward(params, _x(np.random.default_rng(2), 5), TINY_ENCODER, "train")
        new = cache["new_buffers"]
        assert set(new) == {f"encoder.bn{i}.{s}" for i in (1, 2) for s in ("running_mean", "running_var")}
        assert not np.allclose(new["encoder.bn1.running_mean"], 0.0)


class TestHeads:
    def test_identity_projection_normalizes(self):
        params = ModelParams({"p.weight": np.eye(4), "p.bias": np.zeros(4)})
        h = np.random.default_rng(0).standard_normal((5, 4))
        z, _ = projection_forward(params, h, "p")
        assert_allclose(z, h / np.linalg.norm(h, axis=1, keepdims=True), atol=1e-15)

    def test_zero_row_is_flagged(self):
        params = ModelParams({"p.weight": np.eye(3), "p.bias": np.zeros(3)})
        z, cache = projection_forward(params, np.array([[0.0, 0, 0], [3.0, 4, 0]]), "p")
        assert_array_equal(z[0], 0.0)
        assert_allclose(z[1], [0.6, 0.8, 0.0])
        assert_array_equal(cache["degenerate"], [True, False])

    def test_projection_matrix_product_oracle(self):
        rng = np.random.default_rng(4)
        params = init_params(TINY_ENCODER, 4, parts=("proj_ecg",))
        params["proj_ecg.bias"] = rng.standard_normal(TINY_ENCODER.proj_dim)
        h = rng.standard_normal((3, TINY_ENCODER.embed_dim))
        W, b = params["proj_ecg.weight"], params["proj_ecg.bias"]
        ref = np.zeros((3, W.shape[1]))
        for i in range(3):
            for j in range(W.shape[1]):
                ref[i, j] = sum(h[i, k] * W[k, j] for k in range(W.shape[0])) + b[j]
        ref /= np.linalg.norm(ref, axis=1, keepdims=True)
        assert_allclose(projection_forward(params, h)[0], ref, atol=1e-12)

    def test_zero_weight_classifier(self):
        params = init_params(TINY_ENCODER, 0, parts=("classifier",))
        for k in params:
            params[k] = np.zeros_like(params[k])
        logits, _ = classifier_forward(params, np.ones((3, 8)), TINY_ENCODER, "train", seed=0)
        assert_array_equal(logits, 0.0)

    def test_classifier_layerwise_oracle(self):
        cfg = EncoderConfig(embed_dim=8, num_heads=1, classifier_dim=6, classifier_layers=3)
        params = init_params(cfg, 5, parts=("classifier",))
        h = np.random.default_rng(5).standard_normal((4, 8))
        ref = h
        for i in range(3):
            ref = ref @ params[f"classifier.{i}.weight"] + params[f"classifier.{i}.bias"]
            if i < 2:
                ref = np.maximum(ref, 0.0)
        out, _ = classifier_forward(params, h, cfg)
        assert_allclose(out, ref, atol=1e-12)
        assert classifier_forward(params, h, cfg)[0].tobytes() == out.tobytes()

    def test_classifier_train_needs_seed(self):
        params = init_params(TINY_ENCODER, 0, parts=("classifier",))
        with pytest.raises(ValueError):
            classifier_forward(params, np.ones((2, 8)), TINY_ENCODER, "train")

    def test_teacher_oracle(self):
        params = init_params(TINY_ENCODER, 6, teacher_in_dim=5, parts=("teacher",))
        f = np.random.default_rng(6).standard_normal((4, 5))
        hidden = np.maximum(f @ params["teacher.fc1.weight"] + params["teacher.fc1.bias"], 0.0)
        ref = hidden @ params["teacher.fc2.weight"] + params["teacher.fc2.bias"]
        assert_allclose(teacher_forward(params, f)[0], ref, atol=1e-12)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        params = init_params(TINY_ENCODER, 0, parts=("encoder", "classifier"))
        h, enc_cache = ecg_encoder_forward(params, _x(np.random.default_rng(0), 3), TINY_ENCODER, "train")
        logits, cls_cache = classifier_forward(params, h, TINY_ENCODER, "train", seed=1)
        g_cls, dh = model_backward(params, cls_cache, np.zeros_like(logits), return_input_grad=True)
        g_enc = model_backward(params, enc_cache, dh)
        for g in {**g_cls, **g_enc}.values():
            assert_array_equal(g, 0.0)

    def test_dropout_backward_reproducible(self):
        params = init_params(TINY_ENCODER, 0, parts=("classifier",))
        h = np.random.default_rng(1).standard_normal((6, 8))
        up = np.random.default_rng(2).standard_normal((6, 2))
        runs = []
        for _ in range(2):
            _, cache = classifier_forward(params, h, TINY_ENCODER, "train", seed=11)
            runs.append(model_backward(params, cache, up))
        for k in runs[0]:
            assert runs[0][k].tobytes() == runs[1][k].tobytes()

    def test_grad_store_congruent(self):
        params = init_params(TINY_ENCODER, 0)
        h, cache = ecg_encoder_forward(params, _x(np.random.default_rng(3), 2), TINY_ENCODER, "train")
        grads = model_backward(params, cache, np.ones_like(h))
        assert list(grads) == [n for n in params.trainable_names()]
        for k, g in grads.items():
            assert g.shape == params[k].shape

    def test_cache_params_mismatch(self):
        params = init_params(TINY_ENCODER, 0)
        h, cache = ecg_encoder_forward(params, _x(np.random.default_rng(3), 2), TINY_ENCODER)
        other = init_params(EncoderConfig(kernel_size=3, stride1=1, stride2=1, intermediate_dim=4, embed_dim=8,
                                          num_heads=1, num_layers=2, ffn_dim=16, input_length=24), 0)
        with pytest.raises(ValueError):
            model_backward(other, cache, np.ones_like(h))


class TestInit:
    def test_deterministic(self):
        a, b = init_params(TINY_ENCODER, 7, parts=PARTS, teacher_in_dim=4), init_params(TINY_ENCODER, 7, parts=PARTS, teacher_in_dim=4)
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        c = init_params(TINY_ENCODER, 8, parts=PARTS, teacher_in_dim=4)
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    def test_parts_are_independent_streams(self):
        alone = init_params(TINY_ENCODER, 3, parts=("classifier",))
        both = init_params(TINY_ENCODER, 3, parts=("encoder", "classifier"))
        for k in alone:
            assert_array_equal(alone[k], both[k])

    def test_fan_in_variance(self):
        params = init_params(EncoderConfig(), 0, dtype=np.float64)
        w = params["encoder.blocks.0.attn.qkv.weight"]
        target = 1.0 / (3.0 * w.shape[0])
        assert abs(w.var() / target - 1.0) < 0.2
        w = params["encoder.conv2.weight"]
        target = 1.0 / (3.0 * w.shape[1] * w.shape[2])
        assert abs(w.var() / target - 1.0) < 0.2

    def test_zero_biases_unit_norms(self):
        params = init_params(TINY_ENCODER, 0)
        assert_array_equal(params["encoder.conv1.bias"], 0.0)
        assert_array_equal(params["encoder.bn1.gamma"], 1.0)
        assert_array_equal(params["encoder.blocks.0.ln2.beta"], 0.0)


class TestParameterCount:
    @staticmethod
    def _hand_count(leads, inter, d, ffn, k, tokens, layers):
        conv1 = inter * leads * k + inter + 2 * inter
        conv2 = d * inter * k + d + 2 * d
        pos = tokens * d
        block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * ffn + ffn) + (ffn * d + d)
        return conv1 + conv2 + pos + layers * block + 2 * d

    def test_tiny(self):
        assert parameter_count(TINY_ENCODER) == 1052 == self._hand_count(12, 4, 8, 16, 3, 20, 1)

    def test_full_size(self):
        assert parameter_count(EncoderConfig()) == 2331776 == self._hand_count(12, 128, 256, 512, 5, 196, 4)

    def test_matches_tensor_sizes(self):
        for cfg in (TINY_ENCODER, EncoderConfig(classifier_layers=1)):
            params = init_params(cfg, 0, teacher_in_dim=32, parts=PARTS)
            total = sum(params[k].size for k in params.trainable_names())
            assert parameter_count(cfg, 32, PARTS) == total


class TestFrozen:
    def test_frozen_teacher_blocks_updates(self):
        params = init_params(TINY_ENCODER, 0, teacher_in_dim=3, parts=("teacher",))
        params.freeze("teacher")
        assert params.trainable_names() == []
        grads = {"teacher.fc1.bias": np.ones_like(params["teacher.fc1.bias"])}
        with pytest.raises(FrozenParameterError):
            adaptive_moment_step(params, grads, OptimizerState())

    def test_subset_and_without(self):
        params = init_params(TINY_ENCODER, 0, teacher_in_dim=3, parts=("encoder", "proj_ecg", "teacher"))
        params.freeze("teacher")
        enc = params.without("proj_ecg", "teacher")
        assert all(k.startswith("encoder.") for k in enc) and not enc.frozen
        assert params.subset("teacher").frozen == {"teacher"}
