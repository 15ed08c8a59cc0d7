"""Two-stage composition: train the codec on frames, freeze it, train a
predictor on its latents, and run encode -> rollout -> decode at inference.

Stage isolation is structural: latents are precomputed outside any tape and
the optimizer of the predictor stage never sees codec parameters, so codec
gradients are absent rather than zero.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .conv import conv2d
from .data import endless_batches
from .metrics import frame_wise
from .optim import Adam
from .stlstm import STLSTM, SamplingSchedule, sampling_mask
from .tctn import TCTN
from .tensor import (
    GradientTape,
    NumericsError,
    Tensor,
    backward,
    fanin_param,
    mul,
    no_grad,
    reduce_mean,
    reshape,
    sigmoid,
    slice_axis,
    sub,
    zeros,
)
from .vqvae import VQVAE, quantize


class StageError(ValueError):
    """Pipeline stages were invoked out of order or misconfigured."""


def _precision_dtype(cfg: RunConfig):
    return np.float64 if cfg.train.precision == "f64" else np.float32


def build_codec(cfg: RunConfig, rng: np.random.Generator) -> VQVAE:
    return VQVAE(rng, in_channels=1, hidden=cfg.vqvae.hidden, embed_dim=cfg.vqvae.embed_dim,
                 codebook_size=cfg.vqvae.codebook_size, beta=cfg.vqvae.beta,
                 dtype=_precision_dtype(cfg))


def build_predictor(cfg: RunConfig, rng: np.random.Generator):
    dtype = _precision_dtype(cfg)
    if cfg.pipeline.predictor == "stlstm":
        return STLSTM(cfg.vqvae.embed_dim, cfg.stlstm.hidden, cfg.stlstm.layers,
                      cfg.stlstm.kernel, rng, dtype)
    return TCTN(cfg.vqvae.embed_dim, cfg.tctn.channels, cfg.tctn.layers,
                cfg.tctn.kernel, rng, expansion=cfg.tctn.expansion, dtype=dtype)


def latent_mse(preds: Tensor, targets: Tensor) -> Tensor:
    diff = sub(preds, targets)
    return reduce_mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# frozen-codec encoding


def encode_frames(codec: VQVAE, frames: np.ndarray, batch: int = 256):
    """Encode+quantize [num,1,H,W] frames with no gradients recorded."""
    zs, idxs = [], []
    with no_grad():
        for start in range(0, len(frames), batch):
            chunk = Tensor(frames[start:start + batch].astype(codec.dtype))
            vq = codec.quantize(codec.encode(chunk))
            zs.append(vq.z_q.numpy())
            idxs.append(vq.indices)
    return np.concatenate(zs), np.concatenate(idxs)


def encode_sequence(codec: VQVAE, frames: np.ndarray) -> np.ndarray:
    """[S,1,H,W] or [B,S,1,H,W] frames -> quantized latents of matching rank."""
    arr = np.asarray(frames)
    squeeze = arr.ndim == 4
    if squeeze:
        arr = arr[None]
    b, s = arr.shape[:2]
    flat, _ = encode_frames(codec, arr.reshape((b * s,) + arr.shape[2:]))
    latents = flat.reshape((b, s) + flat.shape[1:])
    return latents[0] if squeeze else latents


def decode_latents(codec: VQVAE, latents: np.ndarray, requantize: bool) -> np.ndarray:
    """[B,m,D',h,w] latents -> frames in [0,1]; optionally snap to the codebook."""
    b, m = latents.shape[:2]
    flat = latents.reshape((b * m,) + latents.shape[2:])
    with no_grad():
        z = Tensor(flat.astype(codec.dtype))
        if requantize:
            z = codec.quantize(z).z_q
        frames = codec.decode(z).numpy()
    return frames.reshape((b, m) + frames.shape[1:])


def predict_sequence(codec: VQVAE, predictor, context: np.ndarray, horizon: int,
                     requantize: bool = True) -> np.ndarray:
    """Context frames [B,n,1,H,W] (or unbatched) -> predicted frames [B,m,1,H,W]."""
    arr = np.asarray(context)
    squeeze = arr.ndim == 4
    if squeeze:
        arr = arr[None]
    latents = encode_sequence(codec, arr)
    with no_grad():
        rolled = predictor.rollout(Tensor(latents.astype(codec.dtype)), horizon).numpy()
    frames = decode_latents(codec, rolled, requantize)
    return frames[0] if squeeze else frames


def repeat_last_baseline(context: np.ndarray, horizon: int) -> np.ndarray:
    """Copy the final context frame across the horizon."""
    return np.repeat(context[:, -1:], horizon, axis=1)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainLog:
    header: list[str]
    rows: list[tuple]         # iteration first, loss terms after
    wall_ms: list[float]      # one entry per iteration, kept out of the rows


def _parallel_backward(build_loss, items, threads: int) -> float:
    """Forward each item on its own tape in a pool, then replay backward in
    index order so gradient accumulation stays deterministic."""
    tapes: list = [None] * len(items)
    losses: list = [None] * len(items)

    def fwd(i):
        with GradientTape() as tape:
            losses[i] = build_loss(i, items[i])
        tapes[i] = tape

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fwd, range(len(items))))
    for tape, loss in zip(tapes, losses):
        backward(tape, loss)
    return float(np.mean([l.item() for l in losses]))


def _scale_grads(params, factor: float) -> None:
    for p in params:
        if p.grad is not None:
            p.grad *= factor


def train_codec(codec: VQVAE, frames: np.ndarray, steps: int, batch: int, lr: float,
                seed: int, threads: int = 1) -> TrainLog:
    """Stage 1: VQ training over individual frames."""
    opt = Adam(codec.parameters(), lr=lr)
    gen = endless_batches(frames, batch, seed)
    log = TrainLog(header=["iteration", "total", "recon", "codebook", "commit"],
                   rows=[], wall_ms=[])
    for it in range(1, steps + 1):
        chunk = next(gen).astype(codec.dtype)
        t0 = time.perf_counter()
        if threads == 1:
            losses = codec.train_step(Tensor(chunk), opt)
        else:
            opt.zero_grad()
            parts = np.zeros((len(chunk), 3))

            def one(i, frame):
                total, (rec, cb, commit), _ = codec.forward_loss(Tensor(frame[None]))
                parts[i] = (rec.item(), cb.item(), commit.item())
                return total

            mean_total = _parallel_backward(one, list(chunk), threads)
            if not np.isfinite(mean_total):
                raise NumericsError(f"vq loss is not finite: {mean_total}")
            _scale_grads(opt.params, 1.0 / len(chunk))
            opt.step()
            mean_parts = parts.mean(axis=0)
            losses = {"total": mean_total, "recon": mean_parts[0],
                      "codebook": mean_parts[1], "commit": mean_parts[2]}
        log.wall_ms.append((time.perf_counter() - t0) * 1e3)
        log.rows.append((it, losses["total"], losses["recon"],
                         losses["codebook"], losses["commit"]))
    return log


def predictor_loss(predictor, latents: Tensor, use_truth) -> Tensor:
    if isinstance(predictor, STLSTM):
        preds = predictor.forward(latents, use_truth)
        s = latents.shape[1]
        targets = slice_axis(latents, 1, 1, s)
        return latent_mse(preds, targets)
    # the conv transformer trains on all positions in parallel; the sampling
    # schedule only applies to recurrent unrolls
    preds, targets = predictor.predictions_and_targets(latents)
    return latent_mse(preds, targets)


def train_predictor(predictor, latents: np.ndarray, steps: int, batch: int, lr: float,
                    seed: int, schedule: SamplingSchedule, context_len: int,
                    threads: int = 1) -> TrainLog:
    """Stage 2: latent-space MSE over sequences from a frozen codec."""
    params = predictor.parameters()
    opt = Adam(params, lr=lr)
    gen = endless_batches(latents, batch, seed)
    mask_rng = np.random.default_rng([seed, 1])
    dtype = predictor.dtype
    log = TrainLog(header=["iteration", "loss"], rows=[], wall_ms=[])
    num_inputs = latents.shape[1] - 1
    for it in range(1, steps + 1):
        chunk = next(gen).astype(dtype)
        use_truth = sampling_mask(it, schedule, num_inputs, context_len, mask_rng)
        t0 = time.perf_counter()
        opt.zero_grad()
        if threads == 1:
            with GradientTape() as tape:
                loss = predictor_loss(predictor, Tensor(chunk), use_truth)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericsError(f"predictor loss is not finite: {value}")
                backward(tape, loss)
        else:
            value = _parallel_backward(
                lambda i, seq: predictor_loss(predictor, Tensor(seq[None]), use_truth),
                list(chunk), threads)
            if not np.isfinite(value):
                raise NumericsError(f"predictor loss is not finite: {value}")
            _scale_grads(params, 1.0 / len(chunk))
        opt.step()
        log.wall_ms.append((time.perf_counter() - t0) * 1e3)
        log.rows.append((it, value))
    return log


def train_modular(cfg: RunConfig, split_frames: np.ndarray, stage: str, seed: int,
                  codec: VQVAE | None = None):
    """Run one stage of the modular protocol on [num,S,1,H,W] train sequences.

    stage "codec" trains a fresh codec on individual frames; stage
    "predictor" needs the trained codec and returns a predictor trained on
    its frozen latents. Returns (model, TrainLog).
    """
    init_rng = np.random.default_rng([seed, 0])
    if stage == "codec":
        codec = build_codec(cfg, init_rng)
        frames = split_frames.reshape((-1,) + split_frames.shape[2:])
        log = train_codec(codec, frames, cfg.train.vqvae_steps, cfg.train.batch,
                          cfg.train.lr, seed, cfg.train.threads)
        return codec, log
    if stage != "predictor":
        raise StageError(f"unknown stage {stage!r}; use 'codec' or 'predictor'")
    if codec is None:
        raise StageError("predictor stage requires a trained codec checkpoint; "
                         "run the codec stage first")
    codec.freeze()
    latents = encode_sequence(codec, split_frames)
    predictor = build_predictor(cfg, init_rng)
    schedule = SamplingSchedule(cfg.sampling.mode, cfg.sampling.start_iter,
                                cfg.sampling.end_iter, cfg.sampling.p_start,
                                cfg.sampling.p_end)
    log = train_predictor(predictor, latents, cfg.train.predictor_steps, cfg.train.batch,
                          cfg.train.lr, seed, schedule, cfg.pipeline.context,
                          cfg.train.threads)
    return predictor, log


# ---------------------------------------------------------------------------
# pixel-space baseline (compute comparison)


class PixelBaseline:
    """The same predictor applied to raw frames: a 1x1 patch embedding lifts
    pixels to the latent channel count and a 1x1 head maps back to pixels."""

    def __init__(self, predictor, rng: np.random.Generator):
        self.predictor = predictor
        channels = predictor.latent_channels
        dtype = predictor.dtype
        self.embed_k = fanin_param(rng, (channels, 1, 1, 1), 1, dtype)
        self.embed_b = zeros((channels,), dtype, requires_grad=True)
        self.out_k = fanin_param(rng, (1, channels, 1, 1), channels, dtype)
        self.out_b = zeros((1,), dtype, requires_grad=True)

    def _per_frame_conv(self, x: Tensor, kernel, bias) -> Tensor:
        b, s, c, h, w = x.shape
        flat = reshape(x, (b * s, c, h, w))
        out = conv2d(flat, kernel, bias)
        return reshape(out, (b, s, out.shape[1], h, w))

    def forward_loss(self, frames: Tensor) -> Tensor:
        embedded = self._per_frame_conv(frames, self.embed_k, self.embed_b)
        if isinstance(self.predictor, STLSTM):
            preds = self.predictor.forward(embedded)
        else:
            preds = slice_axis(self.predictor.forward(embedded), 1, 0, frames.shape[1] - 1)
        pixels = sigmoid(self._per_frame_conv(preds, self.out_k, self.out_b))
        targets = slice_axis(frames, 1, 1, frames.shape[1])
        return latent_mse(pixels, targets)

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"baseline.embed.kernel": self.embed_k, "baseline.embed.bias": self.embed_b,
                  "baseline.out.kernel": self.out_k, "baseline.out.bias": self.out_b}
        params.update(self.predictor.named_parameters())
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def train_pixel_baseline(baseline: PixelBaseline, frames: np.ndarray, steps: int,
                         batch: int, lr: float, seed: int) -> TrainLog:
    """Train the pixel-space comparator; used for the compute direction check."""
    params = baseline.parameters()
    opt = Adam(params, lr=lr)
    gen = endless_batches(frames, batch, seed)
    dtype = baseline.predictor.dtype
    log = TrainLog(header=["iteration", "loss"], rows=[], wall_ms=[])
    for it in range(1, steps + 1):
        chunk = next(gen).astype(dtype)
        t0 = time.perf_counter()
        opt.zero_grad()
        with GradientTape() as tape:
            loss = baseline.forward_loss(Tensor(chunk))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsError(f"baseline loss is not finite: {value}")
            backward(tape, loss)
        opt.step()
        log.wall_ms.append((time.perf_counter() - t0) * 1e3)
        log.rows.append((it, value))
    return log


# ---------------------------------------------------------------------------
# evaluation


def evaluate(codec: VQVAE, predictor, test_frames: np.ndarray, context_len: int,
             horizon: int, requantize: bool = True) -> dict:
    """Frame-wise metrics for model predictions and the repeat-last baseline.

    test_frames: [num, S, 1, H, W] with S >= context_len + horizon.
    """
    if test_frames.shape[1] < context_len + horizon:
        raise StageError("test sequences shorter than context + horizon")
    context = test_frames[:, :context_len]
    target = test_frames[:, context_len:context_len + horizon]
    predicted = predict_sequence(codec, predictor, context, horizon, requantize)
    baseline = repeat_last_baseline(context, horizon)
    out = {"model": {}, "repeat_last": {}}
    for metric in ("ssim", "mse", "psnr"):
        out["model"][metric] = frame_wise(metric, predicted, target)
        out["repeat_last"][metric] = frame_wise(metric, baseline, target)
    return out
