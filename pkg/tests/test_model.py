import numpy as np
import pytest

from lsct import tensor as T
from lsct.model import (LSCT, MODES, CheckpointError, ModelConfig, Normalizer, closed_form_param_count,
                        load_checkpoint, loss, loss_terms, read_checkpoint_header, save_checkpoint)
from lsct.msek import ChannelGraph, msek_forward
from lsct.quantize import cam_attend
from lsct.signal import istft_matrix, stft_matrix, synth_pair

TINY = dict(encoder_channels=(4, 4, 4), attn_heads=2, codebook_size=6, msek_heads=2,
            window_len=8, hop=2, n_samples=16)


def tiny(mode="cam+msek", seed=0):
    return LSCT(ModelConfig(mode=mode, seed=seed, **TINY))


@pytest.fixture(scope="module")
def default_model():
    return LSCT(ModelConfig())


@pytest.fixture(scope="module")
def pairs():
    ppg, abp = zip(*(synth_pair(s) for s in range(3)))
    return np.stack([p.samples for p in ppg]), np.stack([a.samples for a in abp])


class TestConfig:
    def test_tiny_dimensions(self):
        cfg = ModelConfig(**TINY)
        assert (cfg.frames, cfg.bins, cfg.dim, cfg.bottleneck) == (8, 5, 4, 2)

    def test_violations_listed(self):
        with pytest.raises(ValueError) as exc:
            ModelConfig(encoder_channels=(0, 5), attn_heads=2, mode="bogus")
        msg = str(exc.value)
        assert "positive" in msg and "divisible" in msg and "mode" in msg

    def test_json_round_trip(self):
        cfg = ModelConfig(mode="cam", seed=4)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_json({"depth": 3})

    @pytest.mark.parametrize("kw", [{}, TINY, dict(encoder_channels=(4, 8), codebook_size=3),
                                    dict(encoder_channels=(6, 2, 4), attn_heads=2, mlp_ratio=3)])
    def test_closed_form_param_count(self, kw):
        cfg = ModelConfig(**kw)
        assert LSCT(cfg).param_count() == closed_form_param_count(cfg)

    def test_default_param_count(self):
        assert closed_form_param_count(ModelConfig()) == 111090


class TestEncoder:
    def test_bottleneck_shape(self, default_model, pairs):
        res = default_model.forward(pairs[0][:2])
        assert res.z_q.shape == (2, 8, 64)

    def test_identical_inputs_identical_codes(self, default_model, pairs):
        x = np.stack([pairs[0][0], pairs[0][0]])
        z = default_model.forward(x).z_q.data
        assert np.array_equal(z[0], z[1])

    def test_zero_input_deterministic_nonzero(self, default_model):
        feats = T.Tensor(np.zeros((1, 64, 66)))
        a = default_model.encode(feats).data
        b = default_model.encode(feats).data
        assert np.array_equal(a, b) and np.abs(a).max() > 0

    def test_wrong_shape(self, default_model):
        with pytest.raises(ValueError, match="encoder expects"):
            default_model.encode(T.Tensor(np.zeros((1, 32, 66))))


class TestDecoder:
    def test_output_shape(self, default_model):
        out = default_model.decode(T.Tensor(np.random.default_rng(0).normal(size=(2, 8, 64))))
        assert out.shape == (2, 64, 66)

    def test_deterministic(self, default_model):
        z = T.Tensor(np.random.default_rng(1).normal(size=(1, 8, 64)))
        assert np.array_equal(default_model.decode(z).data, default_model.decode(z).data)

    def test_gradient(self):
        m = tiny()
        z = T.Tensor(np.random.default_rng(2).normal(size=(2, 2, 4)))
        assert T.grad_check(lambda z: T.mean(T.mul(m.decode(z), m.decode(z))), [z]) < 1e-5


class TestForward:
    def test_decoder_input_identity(self, default_model, pairs):
        res = default_model.forward(pairs[0][:2])
        zv = cam_attend(res.z_q, default_model.params["codebook"])
        expect = msek_forward(zv, default_model.graph, default_model.msek_params).data + res.z_q.data
        assert np.array_equal(res.dec_in.data, expect)

    def test_msek_only_trivial_graph_skip_path(self):
        m = LSCT(ModelConfig(encoder_channels=(1,), attn_heads=1, codebook_size=4, msek_heads=1,
                             window_len=8, hop=2, n_samples=16, mode="msek"))
        assert m.graph.adjacency.shape == (1, 1)
        # W = I over n = 8 tokens makes the single-node aggregation an identity
        m.params["msek.W"].data[:] = np.eye(8)[None]
        res = m.forward(np.random.default_rng(3).normal(size=(2, 16)))
        assert np.array_equal(res.z_g.data, res.z_v.data)
        assert np.array_equal(res.dec_in.data, res.z_v.data + res.z_q.data)

    @pytest.mark.parametrize("mode", MODES)
    def test_reproducible(self, mode):
        x = np.random.default_rng(4).normal(size=(3, 16))
        a = tiny(mode, seed=5).forward(x).x_hat.data
        b = tiny(mode, seed=5).forward(x).x_hat.data
        assert np.array_equal(a, b)

    def test_cam_mode_bypasses_msek(self):
        res = tiny("cam").forward(np.random.default_rng(5).normal(size=(2, 16)))
        assert res.z_g is res.z_v and res.aux is None

    def test_nn_modes_report_indices(self):
        res = tiny("nn-vq").forward(np.random.default_rng(6).normal(size=(2, 16)))
        assert res.indices.shape == (2, 2) and res.aux is not None

    def test_predict_raw_units(self, pairs):
        m = LSCT(ModelConfig(), Normalizer(abp_mean=90.0, abp_std=15.0))
        pred = m.predict(pairs[0][:2])
        raw = m.forward(pairs[0][:2]).x_hat.data
        np.testing.assert_allclose(pred, raw * 15.0 + 90.0, atol=1e-12)


class TestLoss:
    def test_perfect(self):
        x, u = np.ones((2, 16)), np.ones((2, 8, 10))
        assert loss(x, x, u, u).item() == 0.0

    def test_constant_offset(self):
        x, u = np.random.default_rng(0).normal(size=(2, 16)), np.zeros((2, 8, 10))
        assert loss(x, x + 1.0, u, u).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_evaluation(self):
        rng = np.random.default_rng(1)
        x, xh = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
        u, uh = rng.normal(size=(3, 8, 10)), rng.normal(size=(3, 8, 10))
        expect = sum((a - b) ** 2 for a, b in zip(x.ravel(), xh.ravel())) / x.size
        expect += sum((a - b) ** 2 for a, b in zip(u.ravel(), uh.ravel())) / u.size
        assert loss(x, xh, u, uh).item() == pytest.approx(expect, abs=1e-12)

    def test_time_term_is_squared_rmse(self):
        from lsct.metrics import rmse
        rng = np.random.default_rng(2)
        x, xh = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
        u = np.zeros((1, 8, 10))
        t, _ = loss_terms(T.Tensor(x), T.Tensor(xh), T.Tensor(u), T.Tensor(u))
        assert t.item() == pytest.approx(rmse(x[0], xh[0]) ** 2, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            loss(np.zeros((1, 16)), np.zeros((1, 15)), np.zeros((1, 2)), np.zeros((1, 2)))


class TestGradients:
    @pytest.mark.parametrize("mode", ["cam+msek", "cam"])
    def test_end_to_end_every_group(self, mode):
        m = tiny(mode, seed=1)
        rng = np.random.default_rng(7)
        ppg, abp = rng.normal(size=(2, 16)), rng.normal(size=(2, 16))
        names = list(m.params)

        def f(*ts):
            m.params = dict(zip(names, ts))
            return m.objective(ppg, abp)

        assert T.grad_check(f, list(m.params.values())) < 1e-4
        silent = [k for k, p in m.params.items() if p.grad is None or not np.abs(p.grad).max() > 0]
        assert silent == ([] if mode == "cam+msek" else ["msek.W"])

    def test_nn_vq_codebook_receives_aux_gradient(self):
        m = tiny("nn-vq", seed=2)
        rng = np.random.default_rng(8)
        m.objective(rng.normal(size=(2, 16)), rng.normal(size=(2, 16))).backward()
        assert np.abs(m.params["codebook"].grad).max() > 0
        assert np.abs(m.params["enc.embed.w"].grad).max() > 0


class TestNormalizer:
    def test_fit_standardises(self, pairs):
        cfg = ModelConfig().stft
        n = Normalizer.fit(pairs[0], pairs[1], cfg)
        assert n.ppg_mean == pytest.approx(pairs[0].mean())
        m = LSCT(ModelConfig(), n)
        feats = m.input_features(pairs[0])
        assert np.abs(feats.reshape(-1, 66).mean(0)).max() < 1e-9

    def test_stft_matrices_are_inverse(self):
        cfg = ModelConfig(**TINY).stft
        A, S = stft_matrix(cfg), istft_matrix(cfg)
        np.testing.assert_allclose(A @ S, np.eye(16), atol=1e-12)

    def test_graph_adjacency_round_trip(self):
        g = ChannelGraph(np.eye(2, dtype=bool))
        assert g.node_count == 2


class TestCheckpoint:
    def test_round_trip(self, tmp_path, pairs):
        cfg = ModelConfig(mode="cam", seed=3)
        m = LSCT(cfg, Normalizer.fit(pairs[0], pairs[1], cfg.stft))
        save_checkpoint(tmp_path / "a.ckpt", m, step=7, meta={"note": "x"})
        back, header = load_checkpoint(tmp_path / "a.ckpt")
        assert header["step"] == 7 and header["meta"] == {"note": "x"}
        assert back.cfg == cfg
        for k in m.params:
            assert np.array_equal(m.params[k].data, back.params[k].data)
        assert np.array_equal(back.graph.adjacency, m.graph.adjacency)
        assert np.array_equal(back.predict(pairs[0]), m.predict(pairs[0]))

    def test_bytes_deterministic(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", tiny(seed=9))
        save_checkpoint(tmp_path / "b.ckpt", tiny(seed=9))
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_header_readable(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", tiny())
        h = read_checkpoint_header(tmp_path / "a.ckpt")
        assert h["blocks"][0]["name"] == "enc.embed.w"
        assert h["config"]["encoder_channels"] == [4, 4, 4]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"notackpt" + b"\0" * 16)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", tiny())
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "a.ckpt").write_bytes(raw[:-8])
        with pytest.raises((CheckpointError, ValueError)):
            load_checkpoint(tmp_path / "a.ckpt")
