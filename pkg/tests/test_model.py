import numpy as np
import pytest

from sparsevq import model as M
from sparsevq import svq
from sparsevq import tensor as T
from sparsevq.data import WindowDataset
from sparsevq.errors import ConfigurationError, DataLoadError, ShapeMismatchError

from gradcheck import finite_diff_grad, rel_error


def tiny_config(**kw):
    base = dict(input_length=16, horizon=8, n_channels=1, patch_length=4,
                patch_stride=4, d_model=8, n_heads=2, encoder_layers=1,
                decoder_layers=1, codebook_size=16,
                vq_variant=svq.QuantizerVariant(
                    "svq", sparse_cfg=svq.SparseRegressionConfig(
                        k_neighbors=4, max_nonzeros=2)),
                seed=3)
    base.update(kw)
    return M.ModelConfig(**base)


class TestPatchify:
    def test_non_overlapping(self):
        out = M.patchify(np.arange(8.0), 4, 4)
        np.testing.assert_array_equal(out.data, [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_overlapping_count(self):
        out = M.patchify(np.arange(8.0), 4, 2)
        assert out.data.shape == (3, 4)
        np.testing.assert_array_equal(out.data[1], [2, 3, 4, 5])

    def test_single_patch(self):
        x = np.arange(8.0)
        out = M.patchify(x, 8, 1)
        np.testing.assert_array_equal(out.data, x[None, :])

    def test_patch_longer_than_series(self):
        with pytest.raises(ConfigurationError):
            M.patchify(np.arange(4.0), 8, 1)


class TestForwardShapes:
    def test_output_shape_contract(self):
        cfg = M.ModelConfig(input_length=512, horizon=96, n_channels=1,
                            d_model=16, n_heads=2, codebook_size=8,
                            encoder_layers=1, decoder_layers=1)
        model = M.Forecaster(cfg)
        x = np.random.default_rng(0).normal(size=(1, 512, 1))
        pred, commit = model.forward(T.Tensor(x))
        assert pred.data.shape == (1, 96, 1)
        assert commit is not None and commit.data.size == 1

    def test_shape_property_over_random_configs(self):
        rng = np.random.default_rng(1)
        for trial in range(8):
            heads = int(rng.choice([1, 2, 4]))
            d_model = heads * int(rng.choice([4, 8]))
            L = int(rng.choice([16, 24, 32]))
            P = int(rng.choice([4, 8]))
            S = int(rng.choice([2, 4]))
            cfg = M.ModelConfig(
                input_length=L, horizon=int(rng.choice([4, 8])),
                n_channels=int(rng.choice([1, 2, 3])),
                patch_length=P, patch_stride=S, d_model=d_model,
                n_heads=heads, encoder_layers=int(rng.choice([0, 1, 2])),
                decoder_layers=int(rng.choice([0, 1])),
                use_ffn_encoder=bool(rng.choice([True, False])),
                use_revin=bool(rng.choice([True, False])),
                vq_placement=str(rng.choice(["none", "pre_encoder",
                                             "post_encoder"])),
                vq_variant=svq.QuantizerVariant(
                    "svq", sparse_cfg=svq.SparseRegressionConfig(
                        k_neighbors=3, max_nonzeros=2)),
                codebook_size=8, seed=trial)
            model = M.Forecaster(cfg)
            batch = int(rng.choice([1, 2]))
            x = rng.normal(size=(batch, L, cfg.n_channels))
            pred, commit = model.forward(T.Tensor(x))
            assert pred.data.shape == (batch, cfg.horizon, cfg.n_channels)
            if cfg.vq_placement == "none":
                assert commit is None
            else:
                assert np.isfinite(commit.data)

    def test_constant_input_with_zero_head_returns_constant(self):
        cfg = tiny_config(vq_placement="none", use_revin=True)
        model = M.Forecaster(cfg)
        model.head_w.data[:] = 0.0
        model.head_b.data[:] = 0.0
        x = np.full((2, 16, 1), 3.7)
        pred, _ = model.forward(T.Tensor(x))
        np.testing.assert_allclose(pred.data, 3.7, atol=1e-12)

    def test_channel_independence(self):
        cfg = tiny_config(n_channels=3, vq_placement="none")
        model = M.Forecaster(cfg)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 16, 3))
        base = model.predict(x)
        x2 = x.copy()
        x2[:, :, 2] = rng.permutation(x2[:, :, 2].ravel()).reshape(2, 16)
        out2 = model.predict(x2)
        np.testing.assert_array_equal(base[:, :, :2], out2[:, :, :2])

    def test_bad_input_shape(self):
        model = M.Forecaster(tiny_config())
        with pytest.raises(ShapeMismatchError):
            model.forward(T.Tensor(np.zeros((1, 10, 1))))

    def test_attention_rows_sum_to_one(self):
        cfg = tiny_config(vq_placement="none", encoder_layers=2)
        model = M.Forecaster(cfg)
        x = np.random.default_rng(3).normal(size=(2, 16, 1))
        store = []
        model.forward(T.Tensor(x), store_attn=store)
        assert len(store) == 3  # 2 encoder + 1 decoder blocks
        for att in store:
            np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-12)

    def test_forward_repeatable(self):
        model = M.Forecaster(tiny_config())
        x = np.random.default_rng(4).normal(size=(2, 16, 1))
        assert np.array_equal(model.predict(x), model.predict(x))


class TestCountParameters:
    def test_single_block_hand_count(self):
        cfg = M.ModelConfig(input_length=8, horizon=4, patch_length=4,
                            patch_stride=4, d_model=4, n_heads=1,
                            encoder_layers=1, decoder_layers=0,
                            vq_placement="none", use_revin=False,
                            codebook_size=4)
        counts = M.count_parameters(M.Forecaster(cfg))
        assert counts["attention"] == 88  # QKVO 4*(16+4) + layernorm 8

    def test_ffn_closed_form(self):
        cfg = M.ModelConfig(input_length=64, horizon=8, patch_length=8,
                            patch_stride=8, d_model=64, n_heads=4, d_ff=128,
                            encoder_layers=2, decoder_layers=1,
                            use_ffn_encoder=True, use_ffn_decoder=True,
                            vq_placement="none", codebook_size=4)
        counts = M.count_parameters(M.Forecaster(cfg))
        assert counts["ffn"] == 3 * (64 * 128 + 128 + 128 * 64 + 64) == 49728

    def test_ffn_free_twin_differs_only_in_ffn(self):
        base = M.ModelConfig(input_length=64, horizon=16, patch_length=8,
                             patch_stride=4, d_model=16, n_heads=2,
                             encoder_layers=2, decoder_layers=1,
                             codebook_size=8)
        with_ffn = M.count_parameters(M.Forecaster(base.twin(True)))
        without = M.count_parameters(M.Forecaster(base.twin(False)))
        assert without["ffn"] == 0
        assert with_ffn["ffn"] > 0
        for key in ("embed", "positional", "attention", "head", "quantizer",
                    "revin"):
            assert with_ffn[key] == without[key]
        assert with_ffn["total"] - without["total"] == with_ffn["ffn"]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = M.Forecaster(tiny_config())
        x = np.random.default_rng(5).normal(size=(2, 16, 1))
        before = model.predict(x)
        p = tmp_path / "model.svqm"
        M.save_checkpoint(model, p)
        assert p.read_bytes()[:4] == b"SVQM"
        back = M.load_checkpoint(p)
        np.testing.assert_array_equal(back.predict(x), before)

    def test_bad_file_rejected(self, tmp_path):
        p = tmp_path / "bad.svqm"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(DataLoadError):
            M.load_checkpoint(p)

    def test_config_hash_stable(self):
        a = M.config_hash(tiny_config())
        b = M.config_hash(tiny_config())
        assert a == b and len(a) == 12
        assert a != M.config_hash(tiny_config(seed=99))


class TestExportEmbeddings:
    def make_dataset(self, cfg, n_windows=2):
        rng = np.random.default_rng(6)
        steps = cfg.input_length + cfg.horizon + n_windows - 1
        seg = rng.normal(size=(steps, cfg.n_channels))
        return WindowDataset("train", seg, cfg.input_length, cfg.horizon, 1)

    def test_row_count(self, tmp_path):
        cfg = tiny_config()
        model = M.Forecaster(cfg)
        ds = self.make_dataset(cfg, n_windows=2)
        out = tmp_path / "emb.csv"
        cb = tmp_path / "codebook.csv"
        rows = M.export_embeddings(model, ds, "pre_quant", out, cb)
        # 2 windows x 4 patches x 1 channel tokens
        assert rows == 2 * cfg.n_patches
        assert len(out.read_text().strip().split("\n")) == rows
        assert len(cb.read_text().strip().split("\n")) == cfg.codebook_size

    def test_post_quant_without_quantizer_errors(self, tmp_path):
        cfg = tiny_config(vq_placement="none")
        model = M.Forecaster(cfg)
        ds = self.make_dataset(cfg)
        with pytest.raises(ConfigurationError, match="no quantizer"):
            M.export_embeddings(model, ds, "post_quant", tmp_path / "e.csv")


class TestEndToEndGradients:
    def test_every_parameter_matches_finite_differences(self):
        # Gradient check on the straight-through surrogate: discrete
        # selections and sg copies frozen at the base point, everything
        # smooth live. MAE prediction loss + commitment term.
        cfg = tiny_config()
        model = M.Forecaster(cfg)
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 16, 1))
        y = rng.normal(size=(2, 8, 1))
        lam = 0.25

        def live_loss_and_grads():
            model.zero_grad()
            cap = {}
            with T.Tape():
                pred, commit = model.forward(T.Tensor(x), quant_capture=cap)
                err = T.absolute(T.sub(pred, T.Tensor(y)))
                loss = T.add(T.tmean(err), T.scale(commit, lam))
                T.backward(loss)
            grads = {k: t.grad.copy() for k, t in model.parameters().items()}
            return float(loss.data), grads, cap["frozen"]

        base_loss, grads, snapshot = live_loss_and_grads()

        def frozen_loss():
            pred, commit = model.forward(T.Tensor(x), quant_frozen=snapshot)
            err = np.abs(pred.data - y)
            return float(err.mean() + lam * float(commit.data))

        assert abs(frozen_loss() - base_loss) < 1e-12

        params = model.parameters()
        failures = []
        for name, t in params.items():
            def f(arr, _t=t):
                saved = _t.data.copy()
                _t.data[:] = arr
                try:
                    return frozen_loss()
                finally:
                    _t.data[:] = saved

            fd = finite_diff_grad(f, t.data.copy())
            err = rel_error(grads[name], fd, floor=1e-6)
            if err > 1e-3:
                failures.append((name, err))
        assert not failures, f"gradient mismatches: {failures}"
