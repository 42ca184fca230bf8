"""Embedding, encoder, quantizer, decoder, heads, and checkpoints."""

import numpy as np
import pytest

from vqeeg.errors import ConfigError, DimensionError, FormatError
from vqeeg.features import PatchConfig
from vqeeg.model import (
    Checkpoint,
    ModelConfig,
    TokenGrid,
    VQTransformer,
    embed,
    head_forward,
    load_checkpoint,
    load_model,
    quantize,
    save_checkpoint,
)
from vqeeg.numerics import Parameter, Rng, Tensor, backward, mean, square


def toy_config(**overrides) -> ModelConfig:
    """C-agnostic toy geometry: P=8 -> F=4, window 24 -> N=4."""
    kwargs = dict(encoder_layers=1, codebook_size=8, decoder_layers=1,
                  hidden_dim=8, heads=2, ffn_dim=16, dropout=0.0,
                  patch=PatchConfig(8, 8), window_len=24)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def make_model(seed=0, **overrides) -> VQTransformer:
    return VQTransformer(toy_config(**overrides), Rng(seed).child("model"))


def random_features(seed, b=1, c=2, n=4, f=4) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(b, c, n, f))


class TestConfig:
    def test_presets(self):
        small = ModelConfig.preset("small")
        assert (small.encoder_layers, small.codebook_size) == (6, 512)
        base = ModelConfig.preset("base")
        assert (base.encoder_layers, base.codebook_size) == (8, 1024)
        large = ModelConfig.preset("large")
        assert (large.encoder_layers, large.codebook_size) == (12, 2048)
        assert small.hidden_dim == 128
        assert small.decoder_layers == 3
        assert small.ffn_dim == 512

    def test_head_count_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(encoder_layers=1, codebook_size=8, hidden_dim=10, heads=4)

    def test_text_round_trip(self):
        cfg = toy_config(dropout=0.25, n_classes=3)
        assert ModelConfig.from_text(cfg.to_text()) == cfg


class TestEmbed:
    def test_all_zero_weights(self):
        x = random_features(0)
        w_p = Parameter("w_p", np.zeros((4, 8)))
        w_pos = Parameter("w_pos", np.zeros((4, 8)))
        np.testing.assert_array_equal(embed(x, w_p, w_pos).data, 0.0)

    def test_identity_projection(self):
        x = random_features(1, f=4)
        w_p = Parameter("w_p", np.eye(4))
        w_pos = Parameter("w_pos", np.zeros((4, 4)))
        np.testing.assert_array_equal(embed(x, w_p, w_pos).data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 5))
        w_p = Parameter("w_p", rng.normal(size=(5, 6)))
        w_pos = Parameter("w_pos", rng.normal(size=(4, 6)))
        out = embed(x, w_p, w_pos).data
        expected = np.zeros((2, 3, 4, 6))
        for b in range(2):
            for c in range(3):
                for n in range(4):
                    expected[b, c, n] = x[b, c, n] @ w_p.data + w_pos.data[n]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_patch_count_mismatch(self):
        x = random_features(3, n=5)
        w_p = Parameter("w_p", np.zeros((4, 8)))
        w_pos = Parameter("w_pos", np.zeros((4, 8)))
        with pytest.raises(ConfigError, match="patch geometry"):
            embed(x, w_p, w_pos)


class TestEncode:
    def test_zero_layer_identity(self):
        model = make_model(encoder_layers=0)
        x = Tensor(random_features(4, c=3))
        out = model.encode(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_channel_permutation_equivariance(self):
        model = make_model()
        model.eval_mode()
        feats = random_features(5, c=5)
        perm = np.array([3, 0, 4, 2, 1])
        h = model.encode(embed(feats, model.w_p, model.w_pos)).data
        h_perm = model.encode(embed(feats[:, perm], model.w_p, model.w_pos)).data
        np.testing.assert_array_equal(h[:, perm], h_perm)

    def test_bias_only_layer_matches_hand_oracle(self):
        """Zero weights leave only residual + bias paths: H = x + bo + b2."""
        model = make_model(6)
        layer = model.encoder_layers[0]
        for p in (layer.wq, layer.wk, layer.wv, layer.wo,
                  layer.ffn_w1, layer.ffn_w2):
            p.data[...] = 0.0
        rng = np.random.default_rng(7)
        layer.bo.data[...] = rng.normal(size=8)
        layer.ffn_b2.data[...] = rng.normal(size=8)
        x = Tensor(random_features(8, f=8))
        out = model.encode(x)
        expected = x.data + layer.bo.data + layer.ffn_b2.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


class TestQuantize:
    def test_nearest_by_inspection(self):
        codebook = Parameter("cb", np.array([[0.0, 0.0], [1.0, 1.0]]))
        h = Tensor(np.array([[[[0.9, 0.8]]]]))
        indices, quantized, rows = quantize(h, codebook)
        assert indices[0, 0, 0] == 1
        np.testing.assert_array_equal(quantized.data[0, 0, 0], [1.0, 1.0])

    def test_tie_breaks_to_lowest_index(self):
        rows = 10.0 * np.ones((6, 2))
        rows[2] = [0.0, 0.0]
        rows[5] = [2.0, 0.0]
        codebook = Parameter("cb", rows)
        h = Tensor(np.array([[[[1.0, 0.0]]]]))  # exactly between rows 2 and 5
        indices, _, _ = quantize(h, codebook)
        assert indices[0, 0, 0] == 2

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(9)
        codebook = Parameter("cb", rng.normal(size=(32, 6)))
        h = Tensor(rng.normal(size=(2, 3, 5, 6)))
        indices, quantized, rows = quantize(h, codebook)
        flat = h.data.reshape(-1, 6)
        for patch_i, hv in enumerate(flat):
            dists = [np.sqrt(((hv - v) ** 2).sum()) for v in codebook.data]
            assert indices.reshape(-1)[patch_i] == int(np.argmin(dists))
        np.testing.assert_array_equal(quantized.data, codebook.data[indices])

    def test_gradient_contracts(self):
        """Decoder-path grads copy to H; codebook grads only via rows."""
        rng = np.random.default_rng(10)
        codebook = Parameter("cb", rng.normal(size=(4, 3)))
        h = Parameter("h", rng.normal(size=(1, 1, 2, 3)))
        indices, quantized, rows = quantize(h, codebook)
        loss = mean(square(quantized))
        backward(loss)
        np.testing.assert_array_equal(h.grad, quantized.grad)
        np.testing.assert_array_equal(codebook.grad, 0.0)


class TestDecode:
    def test_zero_layer_broadcast_bias(self):
        model = make_model(encoder_layers=0, decoder_layers=0)
        model.w_o.data[...] = 0.0
        model.b_o.data[...] = [1.0, 2.0, 3.0, 4.0]
        vq = Tensor(random_features(11, f=8))
        _, recon = model.decode(vq)
        np.testing.assert_array_equal(recon.data,
                                      np.broadcast_to(model.b_o.data, (1, 2, 4, 4)))

    def test_identity_projection(self):
        # D == F == 8 via patch_len 16
        cfg = toy_config(decoder_layers=0, patch=PatchConfig(16, 16),
                         window_len=48)
        model = VQTransformer(cfg, Rng(0))
        model.w_o.data[...] = np.eye(8)
        model.b_o.data[...] = 0.0
        vq = Tensor(np.random.default_rng(12).normal(size=(1, 2, 4, 8)))
        _, recon = model.decode(vq)
        np.testing.assert_array_equal(recon.data, vq.data)

    def test_forward_bit_reproducible(self):
        feats = random_features(13, c=3)
        out1 = make_model(seed=3).forward(feats).reconstruction.data
        out2 = make_model(seed=3).forward(feats).reconstruction.data
        np.testing.assert_array_equal(out1, out2)


class TestHead:
    def test_zero_weights_give_bias(self):
        w = Parameter("head.w", np.zeros((8, 3)))
        b = Parameter("head.b", np.array([0.5, -1.0, 2.0]))
        hhat = Tensor(random_features(14, f=8))
        logits = head_forward(hhat, w, b)
        np.testing.assert_array_equal(logits.data, np.tile(b.data, (1, 1)))

    def test_constant_stream_pools_to_constant(self):
        row = np.array([1.0, -2.0, 3.0, 0.5])
        hhat = Tensor(np.broadcast_to(row, (1, 3, 5, 4)).copy())
        w = Parameter("head.w", np.eye(4))
        b = Parameter("head.b", np.zeros(4))
        np.testing.assert_allclose(head_forward(hhat, w, b).data, [row], atol=1e-12)

    def test_matches_pool_affine_oracle(self):
        rng = np.random.default_rng(15)
        hhat = rng.normal(size=(2, 3, 4, 6))
        w = Parameter("head.w", rng.normal(size=(6, 2)))
        b = Parameter("head.b", rng.normal(size=2))
        out = head_forward(Tensor(hhat), w, b).data
        for batch in range(2):
            pooled = hhat[batch].mean(axis=(0, 1))
            np.testing.assert_allclose(out[batch], pooled @ w.data + b.data,
                                       atol=1e-12)


class TestTokenGrid:
    def test_validates_range(self):
        with pytest.raises(ConfigError):
            TokenGrid(np.array([[0, 9]]), codebook_size=8)

    def test_tokenize_shapes(self):
        model = make_model()
        grids = model.tokenize(random_features(16, b=3, c=2))
        assert len(grids) == 3
        assert grids[0].indices.shape == (2, 4)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = make_model(17)
        path = tmp_path / "model.eegc"
        save_checkpoint(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        for p in model.parameters():
            np.testing.assert_array_equal(loaded.parameter(p.name).data, p.data)

    def test_step_and_seed_survive(self, tmp_path):
        ckpt = make_model(18).to_checkpoint(step=123, seed=99)
        path = tmp_path / "m.eegc"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.step == 123
        assert back.seed == 99

    def test_mismatched_architecture_names_offender(self, tmp_path):
        small = make_model(19, encoder_layers=1)
        path = tmp_path / "small.eegc"
        save_checkpoint(small, path)
        bigger = make_model(19, encoder_layers=3)
        with pytest.raises(FormatError, match="encoder.layer1"):
            bigger.load_parameters(load_checkpoint(path).params)

    def test_dropped_tensor_reported(self, tmp_path):
        model = make_model(20)
        ckpt = model.to_checkpoint()
        del ckpt.params["quantizer.codebook"]
        path = tmp_path / "broken.eegc"
        save_checkpoint(ckpt, path)
        with pytest.raises(FormatError, match="missing parameter.*quantizer.codebook"):
            make_model(20).load_parameters(load_checkpoint(path).params)

    def test_shape_mismatch_reported(self):
        model = make_model(21)
        ckpt = model.to_checkpoint()
        ckpt.params["embed.w_p"] = np.zeros((2, 2))
        with pytest.raises(FormatError, match="shape mismatch.*embed.w_p"):
            model.load_parameters(ckpt.params)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.eegc"
        path.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(FormatError, match="bad magic"):
            load_checkpoint(path)


class TestEvalPurity:
    def test_eval_forward_is_pure(self):
        model = make_model(22, dropout=0.3)
        model.eval_mode()
        feats = random_features(23, c=3)
        a = model.forward(feats)
        b = model.forward(feats)
        np.testing.assert_array_equal(a.reconstruction.data, b.reconstruction.data)
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_dropout_requires_rng_in_training(self):
        model = make_model(24, dropout=0.1)
        with pytest.raises(ConfigError):
            model.train_mode(None)
