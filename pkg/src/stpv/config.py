"""Run configuration: namespaced `key = value` text with `#` comments.

Unknown keys are rejected. Every run serializes its fully resolved config so
artifacts are reproducible from the emitted file alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Bad key, value, or combination in a run configuration."""


@dataclass
class DataConfig:
    seed: int = 0
    dir: str = "data"
    train_sequences: int = 200
    test_sequences: int = 50
    seq_len: int = 20
    canvas: int = 32
    sprites: int = 2
    speed_min: float = 0.7
    speed_max: float = 1.8
    glyph_size: int = 10
    mnist_images: str = ""  # path to an IDX image file; empty = synthetic glyphs


@dataclass
class VqvaeConfig:
    codebook_size: int = 64
    embed_dim: int = 8
    hidden: int = 32
    beta: float = 0.25


@dataclass
class StlstmConfig:
    layers: int = 4
    hidden: int = 64
    kernel: int = 5


@dataclass
class TctnConfig:
    layers: int = 6
    channels: int = 64
    kernel: int = 3
    expansion: int = 2


@dataclass
class SamplingConfig:
    mode: str = "scheduled"  # teacher_forced | scheduled | reverse_scheduled
    start_iter: int = 0
    end_iter: int = 2000
    p_start: float = 1.0
    p_end: float = 0.0


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 8
    vqvae_steps: int = 2000
    predictor_steps: int = 2000
    threads: int = 1
    precision: str = "f32"  # f32 | f64


@dataclass
class PipelineConfig:
    context: int = 10
    horizon: int = 10
    predictor: str = "stlstm"  # stlstm | tctn
    requantize: bool = True


@dataclass
class BenchConfig:
    trials: int = 5
    iters: int = 5
    batch: int = 1
    seq_len: int = 6
    canvas: int = 64


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vqvae: VqvaeConfig = field(default_factory=VqvaeConfig)
    stlstm: StlstmConfig = field(default_factory=StlstmConfig)
    tctn: TctnConfig = field(default_factory=TctnConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


_CHOICES = {
    "sampling.mode": {"teacher_forced", "scheduled", "reverse_scheduled"},
    "train.precision": {"f32", "f64"},
    "pipeline.predictor": {"stlstm", "tctn"},
}


def known_keys() -> dict[str, type]:
    keys = {}
    defaults = RunConfig()
    for section in fields(RunConfig):
        sub = getattr(defaults, section.name)
        for f in fields(sub):
            keys[f"{section.name}.{f.name}"] = type(getattr(sub, f.name))
    return keys


def _parse_value(key: str, text: str, typ) -> object:
    if typ is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    keys = known_keys()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, _parse_value(key, value, keys[key]))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    for key, allowed in _CHOICES.items():
        section, name = key.split(".", 1)
        value = getattr(getattr(cfg, section), name)
        if value not in allowed:
            raise ConfigError(f"{key}: {value!r} not in {sorted(allowed)}")
    if cfg.pipeline.context < 1 or cfg.pipeline.horizon < 1:
        raise ConfigError("pipeline.context and pipeline.horizon must be >= 1")
    if cfg.pipeline.context + cfg.pipeline.horizon > cfg.data.seq_len:
        raise ConfigError("pipeline.context + pipeline.horizon exceeds data.seq_len")
    if cfg.data.canvas % 4 != 0:
        raise ConfigError("data.canvas must be divisible by the codec downsampling factor 4")
    if cfg.vqvae.embed_dim % 2 != 0:
        raise ConfigError("vqvae.embed_dim must be even (positional embedding pairs)")
    if cfg.vqvae.codebook_size < 2:
        raise ConfigError("vqvae.codebook_size must be >= 2")
    if cfg.stlstm.kernel % 2 == 0 or cfg.tctn.kernel % 2 == 0:
        raise ConfigError("conv kernels must be odd so spatial extents are preserved")
    if cfg.train.threads < 1:
        raise ConfigError("train.threads must be >= 1")
    if not cfg.data.speed_min <= cfg.data.speed_max:
        raise ConfigError("data.speed_min must be <= data.speed_max")
    if cfg.data.glyph_size > cfg.data.canvas:
        raise ConfigError("data.glyph_size larger than data.canvas")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for section in fields(RunConfig):
        sub = getattr(cfg, section.name)
        for f in fields(sub):
            lines.append(f"{section.name}.{f.name} = {_format_value(getattr(sub, f.name))}")
    return "\n".join(sorted(lines)) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def copy_config(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(
        cfg, **{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(RunConfig)})
