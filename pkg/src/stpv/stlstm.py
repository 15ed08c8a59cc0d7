"""Stacked spatiotemporal LSTM predictor.

Each cell keeps a per-layer temporal memory C and shares a spatiotemporal
memory M that zigzags: upward through the stack within a timestep, then from
the top layer back to layer 0 at the next timestep. Training mixes ground
truth and the model's own predictions per the sampling schedule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv2d
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    fanin_param,
    reshape,
    sigmoid,
    slice_axis,
    tanh,
    zeros,
)


class STLSTMCell:
    """One cell of the gate system; all convs preserve spatial extents."""

    def __init__(self, in_channels: int, hidden: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        if kernel % 2 == 0:
            raise ShapeError("cell kernel must be odd to preserve spatial extents")
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.pad = (kernel - 1) // 2
        kx = (hidden, in_channels, kernel, kernel)
        kh = (hidden, hidden, kernel, kernel)
        fan_x = in_channels * kernel * kernel
        fan_h = hidden * kernel * kernel

        def px():
            return fanin_param(rng, kx, fan_x, dtype)

        def ph():
            return fanin_param(rng, kh, fan_h, dtype)

        # temporal branch
        self.w_xg, self.w_hg = px(), ph()
        self.w_xi, self.w_hi = px(), ph()
        self.w_xf, self.w_hf = px(), ph()
        # spatiotemporal branch
        self.w_xg_m, self.w_mg = px(), ph()
        self.w_xi_m, self.w_mi = px(), ph()
        self.w_xf_m, self.w_mf = px(), ph()
        # output gate
        self.w_xo, self.w_ho = px(), ph()
        self.w_co, self.w_mo = ph(), ph()
        # channel merge of [C, M]
        self.w_cm = fanin_param(rng, (hidden, 2 * hidden, 1, 1), 2 * hidden, dtype)
        # gate biases start at zero (no forget-gate trick; tune if needed)
        self.b_g, self.b_i, self.b_f = (zeros((hidden,), dtype, True) for _ in range(3))
        self.b_gm, self.b_im, self.b_fm = (zeros((hidden,), dtype, True) for _ in range(3))
        self.b_o = zeros((hidden,), dtype, True)

    def fuse_kernels(self):
        """Concatenate the x/h/m gate kernels along the output-channel axis so
        each group runs as one convolution; gradients split back through the
        concat. Recompute once per unroll, not per timestep."""
        xk = concat([self.w_xg, self.w_xi, self.w_xf,
                     self.w_xg_m, self.w_xi_m, self.w_xf_m, self.w_xo], axis=0)
        xb = concat([self.b_g, self.b_i, self.b_f,
                     self.b_gm, self.b_im, self.b_fm, self.b_o], axis=0)
        hk = concat([self.w_hg, self.w_hi, self.w_hf, self.w_ho], axis=0)
        mk = concat([self.w_mg, self.w_mi, self.w_mf], axis=0)
        return xk, xb, hk, mk

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor, m_in: Tensor, fused=None):
        """One gate-system update; arithmetic is identical to running the
        seventeen convolutions separately."""
        hid = self.hidden
        xk, xb, hk, mk = fused if fused is not None else self.fuse_kernels()
        xs = conv2d(x, xk, xb, padding=self.pad)
        hs = conv2d(h_prev, hk, padding=self.pad)
        ms = conv2d(m_in, mk, padding=self.pad)

        def part(t, n):
            return slice_axis(t, 1, n * hid, (n + 1) * hid)

        g = tanh(part(xs, 0) + part(hs, 0))
        i = sigmoid(part(xs, 1) + part(hs, 1))
        f = sigmoid(part(xs, 2) + part(hs, 2))
        c_t = f * c_prev + i * g

        g_m = tanh(part(xs, 3) + part(ms, 0))
        i_m = sigmoid(part(xs, 4) + part(ms, 1))
        f_m = sigmoid(part(xs, 5) + part(ms, 2))
        m_t = f_m * m_in + i_m * g_m

        o = sigmoid(part(xs, 6) + part(hs, 3)
                    + conv2d(c_t, self.w_co, padding=self.pad)
                    + conv2d(m_t, self.w_mo, padding=self.pad))
        h_t = o * tanh(conv2d(concat([c_t, m_t], axis=1), self.w_cm))
        return h_t, c_t, m_t

    _KERNELS = ("w_xg", "w_hg", "w_xi", "w_hi", "w_xf", "w_hf",
                "w_xg_m", "w_mg", "w_xi_m", "w_mi", "w_xf_m", "w_mf",
                "w_xo", "w_ho", "w_co", "w_mo", "w_cm",
                "b_g", "b_i", "b_f", "b_gm", "b_im", "b_fm", "b_o")

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{name}": getattr(self, name) for name in self._KERNELS}


@dataclass
class SamplingSchedule:
    """Linear ground-truth probability between two iteration endpoints.

    scheduled mode draws over horizon (decoder) steps with context forced to
    ground truth; reverse_scheduled draws over context (encoder) steps with
    horizon steps always fed from the model; teacher_forced feeds only truth.
    """

    mode: str = "teacher_forced"
    start_iter: int = 0
    end_iter: int = 1
    p_start: float = 1.0
    p_end: float = 1.0

    def __post_init__(self):
        if self.mode not in ("teacher_forced", "scheduled", "reverse_scheduled"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        for p in (self.p_start, self.p_end):
            if not 0.0 <= p <= 1.0:
                raise ValueError("schedule probabilities must lie in [0, 1]")
        if self.end_iter < self.start_iter:
            raise ValueError("end_iter must be >= start_iter")


def ground_truth_probability(iteration: int, schedule: SamplingSchedule) -> float:
    if iteration <= schedule.start_iter or schedule.end_iter == schedule.start_iter:
        return schedule.p_start
    if iteration >= schedule.end_iter:
        return schedule.p_end
    frac = (iteration - schedule.start_iter) / (schedule.end_iter - schedule.start_iter)
    return schedule.p_start + frac * (schedule.p_end - schedule.p_start)


def sampling_mask(iteration: int, schedule: SamplingSchedule, num_inputs: int,
                  context_len: int, rng: np.random.Generator) -> np.ndarray:
    """Per-input-step booleans: True feeds ground truth, False the model.

    Step 0 is always ground truth (there is no prediction yet).
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    mask = np.ones(num_inputs, dtype=bool)
    if schedule.mode == "teacher_forced":
        return mask
    p = ground_truth_probability(iteration, schedule)
    if schedule.mode == "scheduled":
        lo = max(1, context_len)
        mask[lo:] = rng.random(max(0, num_inputs - lo)) < p
    else:  # reverse_scheduled
        hi = min(context_len, num_inputs)
        mask[1:hi] = rng.random(max(0, hi - 1)) < p
        mask[hi:] = False
    return mask


class STLSTM:
    """L stacked cells, a 1x1 output head, and autoregressive rollout."""

    def __init__(self, latent_channels: int, hidden: int, layers: int, kernel: int,
                 rng: np.random.Generator, dtype=np.float32):
        if layers < 1:
            raise ShapeError("need at least one cell layer")
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.dtype = np.dtype(dtype)
        self.cells = [
            STLSTMCell(latent_channels if l == 0 else hidden, hidden, kernel, rng, dtype)
            for l in range(layers)
        ]
        self.head_k = fanin_param(rng, (latent_channels, hidden, 1, 1), hidden, dtype)
        self.head_b = zeros((latent_channels,), dtype, requires_grad=True)

    def _check_input(self, latents: Tensor):
        if latents.ndim != 5:
            raise ShapeError(f"latents must be [B,S,C,H,W], got {latents.shape}")
        if latents.shape[2] != self.latent_channels:
            raise ShapeError(
                f"latents carry {latents.shape[2]} channels, model expects {self.latent_channels}")

    def init_state(self, batch: int, height: int, width: int):
        hs = [zeros((batch, self.hidden, height, width), self.dtype) for _ in self.cells]
        cs = [zeros((batch, self.hidden, height, width), self.dtype) for _ in self.cells]
        m = zeros((batch, self.hidden, height, width), self.dtype)
        return hs, cs, m

    def _step_stack(self, x, hs, cs, m, fused=None):
        if fused is None:
            fused = [None] * len(self.cells)
        for l, cell in enumerate(self.cells):
            inp = x if l == 0 else hs[l - 1]
            hs[l], cs[l], m = cell.step(inp, hs[l], cs[l], m, fused[l])
        return self._project(hs[-1])

    def _project(self, h_top: Tensor) -> Tensor:
        return conv2d(h_top, self.head_k, self.head_b)

    def forward(self, latents: Tensor, use_truth: np.ndarray | None = None) -> Tensor:
        """One-step-ahead predictions for inputs 0..S-2: output [B,S-1,C,H,W]."""
        self._check_input(latents)
        b, s, c, h, w = latents.shape
        if s < 2:
            raise ShapeError("need a sequence of length >= 2")
        if use_truth is None:
            use_truth = np.ones(s - 1, dtype=bool)
        hs, cs, m = self.init_state(b, h, w)
        fused = [cell.fuse_kernels() for cell in self.cells]
        preds = []
        for t in range(s - 1):
            if t == 0 or use_truth[t]:
                x = reshape(slice_axis(latents, 1, t, t + 1), (b, c, h, w))
            else:
                x = preds[-1]
            preds.append(self._step_stack(x, hs, cs, m, fused))
        stacked = [reshape(p, (b, 1, c, h, w)) for p in preds]
        return concat(stacked, axis=1)

    def rollout(self, context: Tensor, horizon: int) -> Tensor:
        """Consume the context, then feed predictions back for `horizon` steps."""
        self._check_input(context)
        b, n, c, h, w = context.shape
        if n < 1 or horizon < 1:
            raise ShapeError("rollout needs context length >= 1 and horizon >= 1")
        hs, cs, m = self.init_state(b, h, w)
        fused = [cell.fuse_kernels() for cell in self.cells]
        pred = None
        for t in range(n):
            x = reshape(slice_axis(context, 1, t, t + 1), (b, c, h, w))
            pred = self._step_stack(x, hs, cs, m, fused)
        outs = [pred]
        for _ in range(horizon - 1):
            outs.append(self._step_stack(outs[-1], hs, cs, m, fused))
        return concat([reshape(p, (b, 1, c, h, w)) for p in outs], axis=1)

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for l, cell in enumerate(self.cells):
            params.update(cell.named(f"stlstm.layer{l}"))
        params["stlstm.head.kernel"] = self.head_k
        params["stlstm.head.bias"] = self.head_b
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())
