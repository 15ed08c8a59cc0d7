"""Causal 3D-convolutional transformer decoder for latent sequences.

Sinusoidal position codes are added to the latent channels, a 1x1x1 conv
lifts them to the layer width, and each decoder layer runs pre-norm masked
convolutional attention followed by a convolutional feed-forward block, both
with residual connections. Every conv is causal in time and the attention
mask is -inf strictly above the diagonal, so output t never sees inputs > t.
"""
from __future__ import annotations

import math

import numpy as np

from .conv import conv3d
from .tensor import (
    ShapeError,
    Tensor,
    add,
    channel_affine,
    concat,
    fanin_param,
    layer_norm,
    leaky_relu,
    matmul,
    ones,
    reshape,
    scale,
    slice_axis,
    softmax,
    transpose,
    zeros,
)


def positional_embedding(seq_len: int, channels: int, height: int, width: int,
                         dtype=np.float32) -> Tensor:
    """[S, C, H, W] sinusoid table: channel 2d is sin(j/10000^(2d/C)), 2d+1 the cos."""
    if channels % 2 != 0:
        raise ShapeError("positional embedding needs an even channel count")
    table = np.zeros((seq_len, channels), dtype=np.float64)
    steps = np.arange(seq_len, dtype=np.float64)
    for d in range(channels // 2):
        angle = steps / (10000.0 ** (2.0 * d / channels))
        table[:, 2 * d] = np.sin(angle)
        table[:, 2 * d + 1] = np.cos(angle)
    grid = np.broadcast_to(table[:, :, None, None], (seq_len, channels, height, width))
    return Tensor._wrap(np.ascontiguousarray(grid).astype(dtype))


def causal_mask(seq_len: int, dtype=np.float32) -> np.ndarray:
    """[S, S] additive mask: 0 where key <= query, -inf otherwise."""
    mask = np.zeros((seq_len, seq_len), dtype=dtype)
    mask[np.triu_indices(seq_len, k=1)] = -np.inf
    return mask


def _timewise_ln(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    # x is [B,C,S,H,W]; normalize each timestep over (C,H,W), then per-channel affine
    xt = transpose(x, (0, 2, 1, 3, 4))
    y = layer_norm(xt, num_axes=3, eps=eps)
    y = channel_affine(y, gamma, beta, axis=2)
    return transpose(y, (0, 2, 1, 3, 4))


class TCTNLayer:
    """Masked conv attention plus conv FFN, pre-norm, residual around both."""

    def __init__(self, width: int, kernel: int, expansion: int,
                 rng: np.random.Generator, dtype=np.float32):
        if kernel % 2 == 0:
            raise ShapeError("layer kernel must be odd to preserve spatial extents")
        self.width = width
        self.pad = (kernel - 1) // 2
        fan = width * kernel ** 3
        shape = (width, width, kernel, kernel, kernel)
        self.w_q = fanin_param(rng, shape, fan, dtype)
        self.w_k = fanin_param(rng, shape, fan, dtype)
        self.w_v = fanin_param(rng, shape, fan, dtype)
        self.w_ffn_in = fanin_param(rng, (expansion * width, width) + (kernel,) * 3, fan, dtype)
        self.w_ffn_out = fanin_param(
            rng, (width, expansion * width) + (kernel,) * 3, expansion * fan, dtype)
        self.ln_attn_g = ones((width,), dtype, requires_grad=True)
        self.ln_attn_b = zeros((width,), dtype, requires_grad=True)
        self.ln_post_g = ones((width,), dtype, requires_grad=True)
        self.ln_post_b = zeros((width,), dtype, requires_grad=True)
        self.ln_ffn_g = ones((width,), dtype, requires_grad=True)
        self.ln_ffn_b = zeros((width,), dtype, requires_grad=True)

    def attention(self, e: Tensor, mask: Tensor) -> Tensor:
        """Scores contract channel and spatial axes jointly to one scalar per
        timestep pair, scaled by 1/sqrt(width), causally masked."""
        b, w, s, h, wd = e.shape
        normed = _timewise_ln(e, self.ln_attn_g, self.ln_attn_b)
        fused = concat([self.w_q, self.w_k, self.w_v], axis=0)
        qkv = conv3d(normed, fused, padding=(0, self.pad, self.pad), causal_time=True)

        def per_step(t: Tensor) -> Tensor:
            return reshape(transpose(t, (0, 2, 1, 3, 4)), (b, s, w * h * wd))

        q2 = per_step(slice_axis(qkv, 1, 0, w))
        k2 = per_step(slice_axis(qkv, 1, w, 2 * w))
        v2 = per_step(slice_axis(qkv, 1, 2 * w, 3 * w))
        scores = scale(matmul(q2, transpose(k2, (0, 2, 1))), 1.0 / math.sqrt(w))
        weights = softmax(add(scores, mask), axis=2)
        mixed = matmul(weights, v2)
        return transpose(reshape(mixed, (b, s, w, h, wd)), (0, 2, 1, 3, 4))

    def forward(self, e: Tensor, mask: Tensor) -> Tensor:
        attended = self.attention(e, mask)
        resid = add(e, _timewise_ln(attended, self.ln_post_g, self.ln_post_b))
        normed = _timewise_ln(resid, self.ln_ffn_g, self.ln_ffn_b)
        hidden = leaky_relu(conv3d(normed, self.w_ffn_in,
                                   padding=(0, self.pad, self.pad), causal_time=True))
        out = conv3d(hidden, self.w_ffn_out, padding=(0, self.pad, self.pad), causal_time=True)
        return add(resid, out)

    _NAMES = ("w_q", "w_k", "w_v", "w_ffn_in", "w_ffn_out",
              "ln_attn_g", "ln_attn_b", "ln_post_g", "ln_post_b", "ln_ffn_g", "ln_ffn_b")

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in self._NAMES}


class TCTN:
    """N decoder layers between 1x1x1 channel projections."""

    def __init__(self, latent_channels: int, width: int, layers: int, kernel: int,
                 rng: np.random.Generator, expansion: int = 2, dtype=np.float32):
        if layers < 1:
            raise ShapeError("need at least one decoder layer")
        self.latent_channels = latent_channels
        self.width = width
        self.dtype = np.dtype(dtype)
        self.embed_k = fanin_param(rng, (width, latent_channels, 1, 1, 1),
                                   latent_channels, dtype)
        self.layers = [TCTNLayer(width, kernel, expansion, rng, dtype) for _ in range(layers)]
        self.head_k = fanin_param(rng, (latent_channels, width, 1, 1, 1), width, dtype)

    def forward(self, latents: Tensor) -> Tensor:
        """One-step-ahead prediction at every position: [B,S,C,H,W] in and out.

        Position t's output predicts the latent at t+1; training reads
        positions 0..S-2, rollout reads the last one.
        """
        if latents.ndim != 5:
            raise ShapeError(f"latents must be [B,S,C,H,W], got {latents.shape}")
        b, s, c, h, w = latents.shape
        if c != self.latent_channels:
            raise ShapeError(
                f"latents carry {c} channels, model expects {self.latent_channels}")
        pos = positional_embedding(s, c, h, w, self.dtype)
        pos_b = Tensor._wrap(np.ascontiguousarray(
            np.broadcast_to(pos.data[None], (b, s, c, h, w))))
        e0 = add(latents, pos_b)
        x = transpose(e0, (0, 2, 1, 3, 4))
        x = conv3d(x, self.embed_k)
        mask = Tensor._wrap(np.ascontiguousarray(
            np.broadcast_to(causal_mask(s, self.dtype)[None], (b, s, s))))
        for layer in self.layers:
            x = layer.forward(x, mask)
        out = conv3d(x, self.head_k)
        return transpose(out, (0, 2, 1, 3, 4))

    def predictions_and_targets(self, latents: Tensor) -> tuple[Tensor, Tensor]:
        s = latents.shape[1]
        preds = slice_axis(self.forward(latents), 1, 0, s - 1)
        targets = slice_axis(latents, 1, 1, s)
        return preds, targets

    def rollout(self, context: Tensor, horizon: int) -> Tensor:
        """Autoregressive: append each last-position prediction and re-run."""
        if context.ndim != 5:
            raise ShapeError(f"context must be [B,S,C,H,W], got {context.shape}")
        if horizon < 1:
            raise ShapeError("rollout needs horizon >= 1")
        seq = context
        n = context.shape[1]
        for _ in range(horizon):
            out = self.forward(seq)
            nxt = slice_axis(out, 1, seq.shape[1] - 1, seq.shape[1])
            seq = concat([seq, nxt], axis=1)
        return slice_axis(seq, 1, n, n + horizon)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tctn.embed.kernel": self.embed_k}
        for i, layer in enumerate(self.layers):
            params.update(layer.named(f"tctn.layer{i}"))
        params["tctn.head.kernel"] = self.head_k
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())
