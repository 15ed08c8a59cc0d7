"""Stage composition: frozen encoding, requantization, isolation, baselines."""
import numpy as np
import pytest

from stpv.config import RunConfig, parse_config
from stpv.pipeline import (
    PixelBaseline,
    StageError,
    build_codec,
    build_predictor,
    decode_latents,
    encode_frames,
    encode_sequence,
    evaluate,
    predict_sequence,
    repeat_last_baseline,
    train_modular,
    train_pixel_baseline,
)
from stpv.data import generate_moving_sequences
from stpv.tensor import Tensor
from stpv.vqvae import VQVAE


def tiny_cfg(**overrides) -> RunConfig:
    text = "\n".join([
        "data.canvas = 16",
        "data.seq_len = 6",
        "data.glyph_size = 5",
        "pipeline.context = 3",
        "pipeline.horizon = 3",
        "vqvae.hidden = 8",
        "vqvae.embed_dim = 4",
        "vqvae.codebook_size = 8",
        "stlstm.layers = 1",
        "stlstm.hidden = 4",
        "stlstm.kernel = 3",
        "tctn.layers = 1",
        "tctn.channels = 4",
        "train.batch = 4",
        "train.vqvae_steps = 5",
        "train.predictor_steps = 5",
    ] + [f"{k} = {v}" for k, v in overrides.items()])
    return parse_config(text)


def tiny_split(cfg, train=6, test=3, seed=0):
    return generate_moving_sequences(
        train, test, cfg.data.seq_len, cfg.data.canvas, cfg.data.canvas, 1,
        (cfg.data.speed_min, cfg.data.speed_max), seed,
        glyphs=None if cfg.data.glyph_size >= 3 else None)


class TestEncoding:
    def test_encode_sequence_shapes(self):
        cfg = tiny_cfg()
        codec = build_codec(cfg, np.random.default_rng(0))
        frames = np.random.default_rng(1).random((20, 1, 16, 16)).astype(np.float32)
        lat = encode_sequence(codec, frames)
        assert lat.shape == (20, 4, 4, 4)
        batched = encode_sequence(codec, frames[None])
        assert batched.shape == (1, 20, 4, 4, 4)

    def test_encoding_is_deterministic_and_gradient_free(self):
        cfg = tiny_cfg()
        codec = build_codec(cfg, np.random.default_rng(2))
        frames = np.random.default_rng(3).random((4, 1, 16, 16)).astype(np.float32)
        a = encode_sequence(codec, frames)
        b = encode_sequence(codec, frames)
        np.testing.assert_array_equal(a, b)
        assert all(p.grad is None for p in codec.parameters())

    def test_every_latent_site_is_a_codebook_row(self):
        cfg = tiny_cfg()
        codec = build_codec(cfg, np.random.default_rng(4))
        frames = np.random.default_rng(5).random((6, 1, 16, 16)).astype(np.float32)
        lat = encode_sequence(codec, frames)
        rows = {r.tobytes() for r in codec.codebook.entries.numpy()}
        sites = lat.transpose(0, 2, 3, 1).reshape(-1, 4)
        assert all(s.tobytes() in rows for s in sites)

    def test_latent_round_trip_equals_codec_reconstruction(self):
        cfg = tiny_cfg()
        codec = build_codec(cfg, np.random.default_rng(6))
        frames = np.random.default_rng(7).random((2, 1, 16, 16)).astype(np.float32)
        lat = encode_sequence(codec, frames)
        via_pipeline = decode_latents(codec, lat[None], requantize=False)[0]
        from stpv.tensor import no_grad

        with no_grad():
            direct = codec.decode(codec.quantize(codec.encode(Tensor(frames))).z_q).numpy()
        np.testing.assert_array_equal(via_pipeline, direct)


class TestPredictSequence:
    def test_shapes_and_requantize_manifold(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(8)
        codec = build_codec(cfg, rng)
        predictor = build_predictor(cfg, rng)
        split = tiny_split(cfg)
        context = split.test[:, :3]
        frames = predict_sequence(codec, predictor, context, horizon=3)
        assert frames.shape == (3, 3, 1, 16, 16)
        assert frames.min() >= 0.0 and frames.max() <= 1.0

    def test_requantized_predictions_decode_identically_to_snapped_indices(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(9)
        codec = build_codec(cfg, rng)
        predictor = build_predictor(cfg, rng)
        lat = np.random.default_rng(10).normal(size=(1, 3, 4, 4, 4)).astype(np.float32)
        from stpv.tensor import no_grad

        with no_grad():
            rolled = predictor.rollout(Tensor(lat), 2).numpy()
        via_flag = decode_latents(codec, rolled, requantize=True)
        flat = rolled.reshape((-1,) + rolled.shape[2:])
        with no_grad():
            z_q = codec.quantize(Tensor(flat)).z_q.numpy()
        direct = decode_latents(codec, z_q.reshape(rolled.shape), requantize=False)
        np.testing.assert_array_equal(via_flag, direct)


class TestStages:
    def test_codec_then_predictor_stage(self):
        cfg = tiny_cfg()
        split = tiny_split(cfg)
        codec, log1 = train_modular(cfg, split.train, "codec", seed=1)
        assert [r[0] for r in log1.rows] == list(range(1, 6))
        predictor, log2 = train_modular(cfg, split.train, "predictor", seed=1, codec=codec)
        assert len(log2.rows) == 5
        assert len(log2.wall_ms) == 5

    def test_predictor_stage_requires_codec(self):
        cfg = tiny_cfg()
        split = tiny_split(cfg)
        with pytest.raises(StageError, match="codec"):
            train_modular(cfg, split.train, "predictor", seed=1)

    def test_unknown_stage(self):
        cfg = tiny_cfg()
        with pytest.raises(StageError):
            train_modular(cfg, tiny_split(cfg).train, "finetune", seed=0)

    def test_codec_bits_frozen_through_predictor_stage(self):
        cfg = tiny_cfg()
        split = tiny_split(cfg)
        codec, _ = train_modular(cfg, split.train, "codec", seed=2)
        before = {k: v.numpy().copy() for k, v in codec.named_parameters().items()}
        train_modular(cfg, split.train, "predictor", seed=2, codec=codec)
        for k, v in codec.named_parameters().items():
            assert v.numpy().tobytes() == before[k].tobytes(), k

    def test_stage_isolation_gradients_absent_not_zero(self):
        cfg = tiny_cfg()
        split = tiny_split(cfg)
        codec, _ = train_modular(cfg, split.train, "codec", seed=3)
        train_modular(cfg, split.train, "predictor", seed=3, codec=codec)
        assert all(p.grad is None for p in codec.parameters())

    def test_threads_mode_is_deterministic(self):
        cfg = tiny_cfg(**{"train.threads": 2, "train.vqvae_steps": 3})
        split = tiny_split(cfg)
        _, log_a = train_modular(cfg, split.train, "codec", seed=4)
        _, log_b = train_modular(cfg, split.train, "codec", seed=4)
        assert log_a.rows == log_b.rows

    def test_predictor_threads_mode_runs(self):
        cfg = tiny_cfg(**{"train.threads": 2, "train.predictor_steps": 3})
        split = tiny_split(cfg)
        codec, _ = train_modular(cfg, split.train, "codec", seed=5)
        _, log_a = train_modular(cfg, split.train, "predictor", seed=5, codec=codec)
        codec2, _ = train_modular(cfg, split.train, "codec", seed=5)
        _, log_b = train_modular(cfg, split.train, "predictor", seed=5, codec=codec2)
        assert log_a.rows == log_b.rows


class TestBaselines:
    def test_repeat_last_shape_and_content(self):
        ctx = np.random.default_rng(11).random((2, 3, 1, 8, 8)).astype(np.float32)
        rep = repeat_last_baseline(ctx, 4)
        assert rep.shape == (2, 4, 1, 8, 8)
        for t in range(4):
            np.testing.assert_array_equal(rep[:, t], ctx[:, -1])

    @pytest.mark.parametrize("kind", ["stlstm", "tctn"])
    def test_pixel_baseline_trains_to_decreasing_loss(self, kind):
        cfg = tiny_cfg(**{"pipeline.predictor": kind})
        rng = np.random.default_rng(12)
        predictor = build_predictor(cfg, rng)
        baseline = PixelBaseline(predictor, rng)
        split = tiny_split(cfg, train=4, test=0)
        log = train_pixel_baseline(baseline, split.train, steps=30, batch=2, lr=3e-3, seed=6)
        first = np.mean([r[1] for r in log.rows[:5]])
        last = np.mean([r[1] for r in log.rows[-5:]])
        assert last < first

    def test_pixel_baseline_output_geometry(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(13)
        baseline = PixelBaseline(build_predictor(cfg, rng), rng)
        frames = Tensor(np.random.default_rng(14).random((1, 4, 1, 16, 16)).astype(np.float32))
        embedded = baseline._per_frame_conv(frames, baseline.embed_k, baseline.embed_b)
        assert embedded.shape == (1, 4, 4, 16, 16)  # channel lift, same pixels


class TestEvaluate:
    def test_eval_emits_model_and_baseline_series(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(15)
        codec = build_codec(cfg, rng)
        predictor = build_predictor(cfg, rng)
        split = tiny_split(cfg)
        out = evaluate(codec, predictor, split.test, context_len=3, horizon=3)
        assert set(out) == {"model", "repeat_last"}
        for source in out.values():
            assert set(source) == {"ssim", "mse", "psnr"}
            assert len(source["ssim"].means) == 3

    def test_eval_rejects_short_sequences(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(16)
        with pytest.raises(StageError):
            evaluate(build_codec(cfg, rng), build_predictor(cfg, rng),
                     np.zeros((1, 4, 1, 16, 16), dtype=np.float32), 3, 3)
