"""Command-line front end.

Subcommands: gen-data, train-vqvae, train-predictor, predict, eval, bench.
Every run writes its fully resolved config next to its outputs; loss and
metric CSVs are byte-deterministic for a fixed config+seed, wall-clock
timings go to separate files. Exit codes: 0 success, 1 usage error, 2
data/config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bench import bench_step_time, write_bench_csv
from .checkpoint import CheckpointError, load_into, save_checkpoint
from .config import ConfigError, RunConfig, load_config, serialize_config
from .data import (
    DataFormatError,
    generate_moving_sequences,
    load_idx_images,
    load_sequences,
    save_sequences,
    synthetic_glyphs,
)
from .metrics import write_series_csv
from .optim import Adam
from .pipeline import (
    PixelBaseline,
    StageError,
    predictor_loss,
    build_codec,
    build_predictor,
    evaluate,
    predict_sequence,
    train_modular,
)
from .tensor import NumericsError, ShapeError, Tensor


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


COMMANDS = ("gen-data", "train-vqvae", "train-predictor", "predict", "eval", "bench")


def _build_parser() -> _Parser:
    parser = _Parser(prog="stpv", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="|".join(COMMANDS))
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override data.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--checkpoint", default=None, help="model checkpoint to load")
    return parser


def _resolve(args) -> tuple[RunConfig, int, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg.data.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.cfg").write_text(serialize_config(cfg))
    return cfg, cfg.data.seed, out


def _write_rows_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_timing_csv(path, wall_ms) -> None:
    lines = ["iteration,wall_ms"]
    lines += [f"{i},{ms!r}" for i, ms in enumerate(wall_ms, start=1)]
    Path(path).write_text("\n".join(lines) + "\n")


def _glyphs(cfg: RunConfig):
    if cfg.data.mnist_images:
        images = load_idx_images(cfg.data.mnist_images)
        if images.shape[1] > cfg.data.canvas or images.shape[2] > cfg.data.canvas:
            raise ConfigError(
                f"MNIST glyphs {images.shape[1]}x{images.shape[2]} exceed the "
                f"{cfg.data.canvas}-pixel canvas")
        return [np.ascontiguousarray(img) for img in images[:1024]]
    return synthetic_glyphs(cfg.data.glyph_size)


def cmd_gen_data(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    split = generate_moving_sequences(
        cfg.data.train_sequences, cfg.data.test_sequences, cfg.data.seq_len,
        cfg.data.canvas, cfg.data.canvas, cfg.data.sprites,
        (cfg.data.speed_min, cfg.data.speed_max), seed, glyphs=_glyphs(cfg))
    save_sequences(out / "train.mmsq", split.train)
    save_sequences(out / "test.mmsq", split.test)


def _load_split(cfg: RunConfig, name: str) -> np.ndarray:
    path = Path(cfg.data.dir) / f"{name}.mmsq"
    if not path.exists():
        raise DataFormatError(f"dataset file {path} not found; run gen-data first "
                              f"(data.dir = {cfg.data.dir!r})")
    return load_sequences(path)


def cmd_train_vqvae(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    train = _load_split(cfg, "train")
    codec, log = train_modular(cfg, train, "codec", seed)
    save_checkpoint(out / "vqvae.stpv", codec.named_parameters())
    _write_rows_csv(out / "vqvae_loss.csv", log.header, log.rows)
    _write_timing_csv(out / "vqvae_timing.csv", log.wall_ms)


def _load_codec(cfg: RunConfig, checkpoint) -> "VQVAE":
    codec = build_codec(cfg, np.random.default_rng(0))
    load_into(checkpoint, codec.named_parameters())
    return codec


def cmd_train_predictor(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    if checkpoint is None:
        raise StageError("train-predictor requires --checkpoint pointing at a trained "
                         "codec; run train-vqvae first")
    codec = _load_codec(cfg, checkpoint)
    train = _load_split(cfg, "train")
    predictor, log = train_modular(cfg, train, "predictor", seed, codec=codec)
    combined = dict(codec.named_parameters())
    combined.update(predictor.named_parameters())
    save_checkpoint(out / "model.stpv", combined)
    _write_rows_csv(out / "predictor_loss.csv", log.header, log.rows)
    _write_timing_csv(out / "predictor_timing.csv", log.wall_ms)


def _load_models(cfg: RunConfig, checkpoint):
    if checkpoint is None:
        raise StageError("this command needs --checkpoint from train-predictor")
    codec = build_codec(cfg, np.random.default_rng(0))
    predictor = build_predictor(cfg, np.random.default_rng(0))
    load_into(checkpoint, codec.named_parameters())
    load_into(checkpoint, predictor.named_parameters())
    codec.freeze()
    return codec, predictor


def cmd_predict(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    codec, predictor = _load_models(cfg, checkpoint)
    test = _load_split(cfg, "test")
    context = test[:, :cfg.pipeline.context]
    frames = predict_sequence(codec, predictor, context, cfg.pipeline.horizon,
                              cfg.pipeline.requantize)
    save_sequences(out / "predictions.mmsq", frames)


def cmd_eval(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    codec, predictor = _load_models(cfg, checkpoint)
    test = _load_split(cfg, "test")
    results = evaluate(codec, predictor, test, cfg.pipeline.context,
                       cfg.pipeline.horizon, cfg.pipeline.requantize)
    summary = ["source,metric,mean"]
    for source in ("model", "repeat_last"):
        for metric in ("ssim", "mse", "psnr"):
            series = results[source][metric]
            write_series_csv(out / f"eval_{source}_{metric}.csv", series)
            summary.append(f"{source},{metric},{series.mean!r}")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")


def cmd_bench(cfg: RunConfig, seed: int, out: Path, checkpoint) -> None:
    rng = np.random.default_rng(seed)
    canvas = cfg.bench.canvas
    latent_side = canvas // 4
    embed = cfg.vqvae.embed_dim
    b, s = cfg.bench.batch, cfg.bench.seq_len

    codec = build_codec(cfg, np.random.default_rng([seed, 0]))
    codec.freeze()
    predictor = build_predictor(cfg, np.random.default_rng([seed, 1]))
    latents = Tensor(rng.normal(size=(b, s, embed, latent_side, latent_side))
                     .astype(predictor.dtype))
    opt = Adam(predictor.parameters(), lr=cfg.train.lr)
    modular = bench_step_time(
        f"{cfg.pipeline.predictor}-modular",
        lambda: predictor_loss(predictor, latents, None), opt, predictor, codec,
        trials=cfg.bench.trials, iters=cfg.bench.iters)

    baseline = PixelBaseline(build_predictor(cfg, np.random.default_rng([seed, 2])),
                             np.random.default_rng([seed, 3]))
    frames = Tensor(rng.random((b, s, 1, canvas, canvas)).astype(baseline.predictor.dtype))
    opt_b = Adam(baseline.parameters(), lr=cfg.train.lr)
    pixel = bench_step_time(
        f"{cfg.pipeline.predictor}-pixel-baseline",
        lambda: baseline.forward_loss(frames), opt_b, baseline,
        trials=cfg.bench.trials, iters=cfg.bench.iters)

    write_bench_csv(out / "bench.csv", [modular, pixel])


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train-vqvae": cmd_train_vqvae,
    "train-predictor": cmd_train_predictor,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing subcommand; choose from {', '.join(COMMANDS)}")
        cfg, seed, out = _resolve(args)
        _DISPATCH[args.command](cfg, seed, out, args.checkpoint)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataFormatError, CheckpointError, StageError, ShapeError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
