"""Spatial codec: conv encoder, nearest-neighbor codebook quantization with a
straight-through gradient, and a mirrored conv decoder.

The encoder downsamples 4x (two stride-2 4x4 convs, then two residual blocks);
the decoder mirrors it and ends in a sigmoid. Trained standalone on frames,
then frozen: the predictor stage never records codec gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv2d, conv2d_transpose
from .optim import Adam
from .tensor import (
    GradientTape,
    NumericsError,
    ShapeError,
    Tensor,
    _record,
    add,
    backward,
    bias_add,
    embedding,
    fanin_param,
    leaky_relu,
    mul,
    reduce_mean,
    reshape,
    scale,
    sigmoid,
    stop_gradient,
    sub,
    transpose,
    uniform_param,
    zeros,
)

DOWNSAMPLE = 4


@dataclass
class VQOutput:
    z_e: Tensor            # pre-quantization encoder output
    indices: np.ndarray    # nearest codebook row per site
    z_q: Tensor            # quantized embeddings, rows of the codebook


class Codebook:
    """K x D' table of embedding vectors."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        if size < 2:
            raise ValueError("codebook needs K >= 2")
        self.entries = uniform_param(rng, (size, dim), 1.0 / size, dtype)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def nearest_indices(z_e: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Argmin over squared distances, ties to the lowest index (argmin order)."""
    diff = z_e[:, None, :] - entries[None, :, :]
    dist = (diff * diff).sum(axis=2)
    return dist.argmin(axis=1)


def quantize(z_e: Tensor, codebook: Codebook) -> VQOutput:
    """Snap each spatial site of [B,D',h,w] (or [D',h,w]) to its nearest row."""
    squeeze = z_e.ndim == 3
    z = z_e if not squeeze else None
    data = z_e.data[None] if squeeze else z_e.data
    b, d, h, w = data.shape
    if d != codebook.dim:
        raise ShapeError(f"quantize: embedding dim {d} != codebook dim {codebook.dim}")
    sites = np.ascontiguousarray(data.transpose(0, 2, 3, 1)).reshape(-1, d)
    idx = nearest_indices(sites, codebook.entries.data).reshape(b, h, w)
    gathered = embedding(codebook.entries, idx)          # [B,h,w,D'], rows bit-exact
    z_q = transpose(gathered, (0, 3, 1, 2))
    if squeeze:
        idx = idx[0]
        z_q = reshape(z_q, (d, h, w))
    return VQOutput(z_e=z_e, indices=idx, z_q=z_q)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward exactly z_q; gradient passes to z_e unchanged, none to z_q."""
    if z_e.shape != z_q.shape:
        raise ShapeError(f"straight_through: shapes {z_e.shape} and {z_q.shape} must match")
    out = Tensor._wrap(z_q.data)

    def bwd(g):
        return (g,)

    return _record(out, (z_e,), bwd)


def codebook_usage(indices, codebook_size: int) -> float:
    """Fraction of codebook entries hit at least once over a dataset."""
    arr = np.concatenate([np.asarray(i).reshape(-1) for i in np.atleast_1d(indices)]) \
        if isinstance(indices, (list, tuple)) else np.asarray(indices).reshape(-1)
    if arr.size == 0:
        raise ValueError("codebook_usage needs at least one index")
    return len(np.unique(arr)) / codebook_size


class _ResBlock:
    # 3x3 conv, activation, 1x1 conv, skip-add
    def __init__(self, channels, hidden, rng, dtype):
        self.k1 = fanin_param(rng, (hidden, channels, 3, 3), channels * 9, dtype)
        self.b1 = zeros((hidden,), dtype, requires_grad=True)
        self.k2 = fanin_param(rng, (channels, hidden, 1, 1), hidden, dtype)
        self.b2 = zeros((channels,), dtype, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        y = leaky_relu(conv2d(x, self.k1, self.b1, padding=1))
        return x + conv2d(y, self.k2, self.b2)

    def named(self, prefix):
        return {f"{prefix}.conv1.kernel": self.k1, f"{prefix}.conv1.bias": self.b1,
                f"{prefix}.conv2.kernel": self.k2, f"{prefix}.conv2.bias": self.b2}


class VQVAE:
    def __init__(self, rng: np.random.Generator, in_channels: int = 1, hidden: int = 32,
                 embed_dim: int = 8, codebook_size: int = 64, beta: float = 0.25,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.beta = beta
        self.dtype = np.dtype(dtype)

        self.enc1_k = fanin_param(rng, (hidden, in_channels, 4, 4), in_channels * 16, dtype)
        self.enc1_b = zeros((hidden,), dtype, requires_grad=True)
        self.enc2_k = fanin_param(rng, (embed_dim, hidden, 4, 4), hidden * 16, dtype)
        self.enc2_b = zeros((embed_dim,), dtype, requires_grad=True)
        self.enc_res = [_ResBlock(embed_dim, hidden, rng, dtype) for _ in range(2)]

        self.dec_res = [_ResBlock(embed_dim, hidden, rng, dtype) for _ in range(2)]
        self.dec1_k = fanin_param(rng, (embed_dim, hidden, 4, 4), embed_dim * 16, dtype)
        self.dec1_b = zeros((hidden,), dtype, requires_grad=True)
        self.dec2_k = fanin_param(rng, (hidden, in_channels, 4, 4), hidden * 16, dtype)
        self.dec2_b = zeros((in_channels,), dtype, requires_grad=True)

        self.codebook = Codebook(codebook_size, embed_dim, rng, dtype)

    # -- shape plumbing ------------------------------------------------------

    def _batched(self, x: Tensor, channels: int) -> tuple[Tensor, bool]:
        if x.ndim == 3:
            return reshape(x, (1,) + x.shape), True
        if x.ndim != 4:
            raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
        if x.shape[1] != channels:
            raise ShapeError(f"expected {channels} channels, got {x.shape[1]}")
        return x, False

    def encode(self, frame: Tensor) -> Tensor:
        """Frame [D,H,W] or [N,D,H,W] -> latent grid at H/4 x W/4."""
        x, squeeze = self._batched(frame, self.in_channels)
        h, w = x.shape[2], x.shape[3]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ShapeError(f"frame extents {h}x{w} not divisible by {DOWNSAMPLE}")
        y = leaky_relu(conv2d(x, self.enc1_k, self.enc1_b, stride=2, padding=1))
        y = conv2d(y, self.enc2_k, self.enc2_b, stride=2, padding=1)
        for block in self.enc_res:
            y = block.forward(y)
        if squeeze:
            y = reshape(y, y.shape[1:])
        return y

    def decode(self, z_q: Tensor) -> Tensor:
        """Latent grid -> frame in [0, 1], mirroring the encoder."""
        x, squeeze = self._batched(z_q, self.embed_dim)
        y = x
        for block in self.dec_res:
            y = block.forward(y)
        y = leaky_relu(bias_add(conv2d_transpose(y, self.dec1_k, stride=2, padding=1),
                                self.dec1_b))
        y = sigmoid(bias_add(conv2d_transpose(y, self.dec2_k, stride=2, padding=1),
                             self.dec2_b))
        if squeeze:
            y = reshape(y, y.shape[1:])
        return y

    def quantize(self, z_e: Tensor) -> VQOutput:
        return quantize(z_e, self.codebook)

    # -- training ------------------------------------------------------------

    def loss_terms(self, frames: Tensor, recon: Tensor, z_e: Tensor, z_q: Tensor):
        """(reconstruction, codebook, commitment) means over batch and sites."""
        rec = _mean_sq(sub(frames, recon))
        codebook = _mean_sq(sub(stop_gradient(z_e), z_q))
        commit = _mean_sq(sub(z_e, stop_gradient(z_q)))
        return rec, codebook, commit

    def forward_loss(self, frames: Tensor):
        z_e = self.encode(frames)
        vq = self.quantize(z_e)
        recon = self.decode(straight_through(z_e, vq.z_q))
        rec, codebook, commit = self.loss_terms(frames, recon, z_e, vq.z_q)
        total = add(add(rec, codebook), scale(commit, self.beta))
        return total, (rec, codebook, commit), vq

    def train_step(self, frames: Tensor, opt: Adam) -> dict[str, float]:
        opt.zero_grad()
        with GradientTape() as tape:
            total, (rec, codebook, commit), _ = self.forward_loss(frames)
            loss = total.item()
            if not np.isfinite(loss):
                raise NumericsError(f"vq loss is not finite: {loss}")
            backward(tape, total)
        opt.step()
        return {"total": loss, "recon": rec.item(),
                "codebook": codebook.item(), "commit": commit.item()}

    # -- parameters ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "vqvae.enc.conv1.kernel": self.enc1_k, "vqvae.enc.conv1.bias": self.enc1_b,
            "vqvae.enc.conv2.kernel": self.enc2_k, "vqvae.enc.conv2.bias": self.enc2_b,
        }
        for i, block in enumerate(self.enc_res):
            params.update(block.named(f"vqvae.enc.res{i}"))
        for i, block in enumerate(self.dec_res):
            params.update(block.named(f"vqvae.dec.res{i}"))
        params.update({
            "vqvae.dec.deconv1.kernel": self.dec1_k, "vqvae.dec.deconv1.bias": self.dec1_b,
            "vqvae.dec.deconv2.kernel": self.dec2_k, "vqvae.dec.deconv2.bias": self.dec2_b,
            "vqvae.codebook": self.codebook.entries,
        })
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self) -> None:
        """Stop all parameters from receiving gradients; the codec is now fixed."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None


def _mean_sq(x: Tensor) -> Tensor:
    return reduce_mean(mul(x, x))
