"""CLI workflow on a miniature config: exit codes, artifacts, determinism."""
import numpy as np
import pytest

from stpv.checkpoint import load_checkpoint
from stpv.cli import main
from stpv.data import load_sequences

TINY = """
data.seed = 11
data.train_sequences = 4
data.test_sequences = 2
data.seq_len = 6
data.canvas = 16
data.sprites = 1
data.glyph_size = 5
pipeline.context = 3
pipeline.horizon = 3
vqvae.hidden = 8
vqvae.embed_dim = 4
vqvae.codebook_size = 8
stlstm.layers = 1
stlstm.hidden = 4
stlstm.kernel = 3
train.batch = 4
train.vqvae_steps = 4
train.predictor_steps = 4
sampling.end_iter = 4
bench.trials = 5
bench.iters = 1
bench.canvas = 16
bench.seq_len = 3
bench.batch = 1
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY + f"data.dir = {tmp_path / 'data'}\n")
    return tmp_path, cfg


def run(args):
    return main([str(a) for a in args])


class TestWorkflow:
    def test_full_modular_protocol(self, workdir):
        tmp, cfg = workdir
        data, train, out = tmp / "data", tmp / "vq", tmp / "run"
        assert run(["gen-data", "--config", cfg, "--out", data]) == 0
        assert (data / "train.mmsq").exists() and (data / "test.mmsq").exists()
        assert (data / "config_resolved.cfg").exists()

        assert run(["train-vqvae", "--config", cfg, "--out", train]) == 0
        assert (train / "vqvae.stpv").exists()
        loss_lines = (train / "vqvae_loss.csv").read_text().strip().splitlines()
        assert loss_lines[0] == "iteration,total,recon,codebook,commit"
        assert len(loss_lines) == 5
        iters = [int(line.split(",")[0]) for line in loss_lines[1:]]
        assert iters == sorted(iters) == [1, 2, 3, 4]

        assert run(["train-predictor", "--config", cfg, "--out", out,
                    "--checkpoint", train / "vqvae.stpv"]) == 0
        assert (out / "model.stpv").exists()
        assert (out / "predictor_loss.csv").exists()
        assert (out / "predictor_timing.csv").exists()

        assert run(["predict", "--config", cfg, "--out", out / "pred",
                    "--checkpoint", out / "model.stpv"]) == 0
        preds = load_sequences(out / "pred" / "predictions.mmsq")
        assert preds.shape == (2, 3, 1, 16, 16)

        assert run(["eval", "--config", cfg, "--out", out / "eval",
                    "--checkpoint", out / "model.stpv"]) == 0
        summary = (out / "eval" / "summary.csv").read_text().splitlines()
        assert summary[0] == "source,metric,mean"
        assert any(line.startswith("model,ssim,") for line in summary)
        assert any(line.startswith("repeat_last,ssim,") for line in summary)
        assert (out / "eval" / "eval_model_ssim.csv").exists()

    def test_codec_checkpoint_unchanged_by_predictor_stage(self, workdir):
        tmp, cfg = workdir
        run(["gen-data", "--config", cfg, "--out", tmp / "data"])
        run(["train-vqvae", "--config", cfg, "--out", tmp / "vq"])
        codec_bytes = (tmp / "vq" / "vqvae.stpv").read_bytes()
        run(["train-predictor", "--config", cfg, "--out", tmp / "run",
             "--checkpoint", tmp / "vq" / "vqvae.stpv"])
        assert (tmp / "vq" / "vqvae.stpv").read_bytes() == codec_bytes
        # embedded codec tensors in the combined model match the codec file
        stored = load_checkpoint(tmp / "vq" / "vqvae.stpv")
        combined = load_checkpoint(tmp / "run" / "model.stpv")
        for name, arr in stored.items():
            np.testing.assert_array_equal(combined[name], arr)


class TestExitCodes:
    def test_usage_errors(self, workdir):
        _, cfg = workdir
        assert run([]) == 1
        assert run(["train-vqvae"]) == 1                      # missing required flags
        assert main(["not-a-command", "--config", str(cfg), "--out", "x"]) == 1

    def test_config_errors_exit_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("vqvae.codebooks = 3\n")
        assert run(["gen-data", "--config", bad, "--out", tmp_path / "o"]) == 2
        assert run(["gen-data", "--config", tmp_path / "missing.cfg",
                    "--out", tmp_path / "o"]) == 2

    def test_missing_dataset_exits_2(self, workdir):
        tmp, cfg = workdir
        assert run(["train-vqvae", "--config", cfg, "--out", tmp / "vq"]) == 2

    def test_predictor_without_codec_checkpoint_exits_2(self, workdir):
        tmp, cfg = workdir
        run(["gen-data", "--config", cfg, "--out", tmp / "data"])
        assert run(["train-predictor", "--config", cfg, "--out", tmp / "run"]) == 2

    def test_negative_seed_rejected(self, workdir):
        tmp, cfg = workdir
        assert run(["gen-data", "--config", cfg, "--out", tmp / "data",
                    "--seed", "-3"]) == 2


class TestDeterminism:
    def test_identical_runs_emit_byte_identical_artifacts(self, workdir):
        tmp, cfg = workdir
        run(["gen-data", "--config", cfg, "--out", tmp / "data"])
        for tag in ("a", "b"):
            run(["train-vqvae", "--config", cfg, "--out", tmp / f"vq_{tag}",
                 "--seed", "77"])
            run(["train-predictor", "--config", cfg, "--out", tmp / f"run_{tag}",
                 "--checkpoint", tmp / f"vq_{tag}" / "vqvae.stpv", "--seed", "77"])
            run(["eval", "--config", cfg, "--out", tmp / f"eval_{tag}",
                 "--checkpoint", tmp / f"run_{tag}" / "model.stpv", "--seed", "77"])
        for rel in ("vq_a/vqvae_loss.csv", "run_a/predictor_loss.csv",
                    "eval_a/summary.csv", "eval_a/eval_model_ssim.csv",
                    "vq_a/vqvae.stpv", "run_a/model.stpv"):
            other = rel.replace("a/", "b/", 1)
            assert (tmp / rel).read_bytes() == (tmp / other).read_bytes(), rel

    def test_seed_flag_overrides_config(self, workdir):
        tmp, cfg = workdir
        run(["gen-data", "--config", cfg, "--out", tmp / "d1", "--seed", "5"])
        run(["gen-data", "--config", cfg, "--out", tmp / "d2", "--seed", "6"])
        a = (tmp / "d1" / "train.mmsq").read_bytes()
        b = (tmp / "d2" / "train.mmsq").read_bytes()
        assert a != b
        resolved = (tmp / "d1" / "config_resolved.cfg").read_text()
        assert "data.seed = 5" in resolved


def test_bench_command(workdir):
    tmp, cfg = workdir
    assert run(["bench", "--config", cfg, "--out", tmp / "bench"]) == 0
    text = (tmp / "bench" / "bench.csv").read_text()
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    assert lines[0].startswith("name,")
    assert len(lines) == 3  # header + modular + pixel baseline
    modular = lines[1].split(",")
    pixel = lines[2].split(",")
    assert modular[0] == "stlstm-modular" and pixel[0] == "stlstm-pixel-baseline"
    assert int(modular[2]) > 0          # frozen codec params reported
    assert int(pixel[2]) == 0           # baseline has nothing frozen
