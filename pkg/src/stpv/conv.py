"""2-D and 3-D convolutions (plus the 2-D transpose) for [N, C, (T,) H, W] data.

Forward uses strided patch views contracted with `tensordot`; backward reuses
the padded input, so the only extra array kept alive per conv is that padding
copy. `conv2d_transpose` is the exact adjoint of `conv2d` under the Euclidean
inner product, and `conv3d` with `causal_time` pads only the past side of the
time axis so outputs never depend on later inputs.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, ShapeError, _guard, _record


def _pair(v):
    return (v, v)


def _zero_pad2d(x, ph, pw):
    # direct allocate-and-assign; np.pad costs noticeably more on hot paths
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _patches2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * sh, s3 * sw))


def _patches3d(xp, kt, kh, kw, st, sh, sw, to, ho, wo):
    n, c = xp.shape[:2]
    s0, s1, s2, s3, s4 = xp.strides
    return as_strided(
        xp,
        (n, c, kt, kh, kw, to, ho, wo),
        (s0, s1, s2, s3, s4, s2 * st, s3 * sh, s4 * sw),
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] with [O,C,kh,kw], zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be [O,C,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv2d: input channels (axis 1 = {c}) != kernel channels (axis 1 = {ck})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride} must be >= 1, padding {padding} >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    if bias is not None and (bias.ndim != 1 or bias.shape[0] != o):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be [{o}]")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = _zero_pad2d(x.data, padding, padding)
    patches = _patches2d(xp, kh, kw, stride, stride, ho, wo)
    data = np.tensordot(patches, kernel.data, axes=((1, 2, 3), (1, 2, 3)))
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))
    if bias is not None:
        data += bias.data.reshape(1, -1, 1, 1)
    _guard(data, "conv2d")
    out = Tensor._wrap(data)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gx = _conv2d_grad_input(g, kernel.data, stride, padding, (h, w)) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            p = _patches2d(xp, kh, kw, stride, stride, ho, wo)
            gk = np.tensordot(g, p, axes=((0, 2, 3), (0, 4, 5)))
        if bias is None:
            return gx, gk
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return _record(out, parents, bwd, saved_bytes=xp.nbytes if padding else 0)


def _conv2d_grad_input(g, kernel, stride, padding, in_hw):
    n, o, ho, wo = g.shape
    _, c, kh, kw = kernel.shape
    h, w = in_hw
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        # stride-1 fast path: full correlation with the flipped kernel
        flipped = kernel[:, :, ::-1, ::-1]
        gp = _zero_pad2d(g, kh - 1 - padding, kw - 1 - padding)
        patches = _patches2d(gp, kh, kw, 1, 1, h, w)
        dx = np.tensordot(patches, flipped, axes=((1, 2, 3), (0, 2, 3)))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    t = np.tensordot(g, kernel, axes=((1,), (0,)))          # [N,ho,wo,C,kh,kw]
    t = np.ascontiguousarray(t.transpose(0, 3, 1, 2, 4, 5))  # [N,C,ho,wo,kh,kw]
    full = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += t[..., i, j]
    return np.ascontiguousarray(full[:, :, padding:padding + h, padding:padding + w])


def _scatter2d(t, stride, padding, out_hw, full_hw):
    # t: [N,O,H,W,kh,kw]; output position of (y, i) is y*stride - padding + i
    n, o, h, w, kh, kw = t.shape
    full = np.zeros((n, o) + full_hw, dtype=t.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += t[..., i, j]
    ho, wo = out_hw
    return np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed conv of [N,C,H,W] with [C,O,kh,kw]; the adjoint of conv2d."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transpose: input must be [N,C,H,W], got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d_transpose: kernel must be [C,O,kh,kw], got {kernel.shape}")
    n, c, h, w = x.shape
    ck, o, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(
            f"conv2d_transpose: input channels (axis 1 = {c}) != kernel channels (axis 0 = {ck})")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d_transpose: stride must be >= 1 and padding >= 0")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: output extent {ho}x{wo} must be positive")

    t = np.tensordot(x.data, kernel.data, axes=((1,), (0,)))  # [N,H,W,O,kh,kw]
    t = np.ascontiguousarray(t.transpose(0, 3, 1, 2, 4, 5))
    full_hw = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    data = _scatter2d(t, stride, padding, (ho, wo), full_hw)
    _guard(data, "conv2d_transpose")
    out = Tensor._wrap(data)

    def bwd(g):
        gp = _zero_pad2d(g, padding, padding)
        gx = None
        if x.requires_grad:
            patches = _patches2d(gp, kh, kw, stride, stride, h, w)
            gx = np.tensordot(patches, kernel.data, axes=((1, 2, 3), (1, 2, 3)))
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gk = None
        if kernel.requires_grad:
            patches = _patches2d(gp, kh, kw, stride, stride, h, w)
            gk = np.tensordot(x.data, patches, axes=((0, 2, 3), (0, 4, 5)))
        return gx, gk

    return _record(out, (x, kernel), bwd)


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), padding=(0, 0, 0),
           causal_time: bool = False) -> Tensor:
    """Cross-correlation of [N,C,T,H,W] with [O,C,kt,kh,kw].

    With `causal_time` the time axis is padded with kt-1 leading zeros only,
    so output index t never sees input indices > t.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be [N,C,T,H,W], got {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d: kernel must be [O,C,kt,kh,kw], got {kernel.shape}")
    n, c, tt, h, w = x.shape
    o, ck, kt, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv3d: input channels (axis 1 = {c}) != kernel channels (axis 1 = {ck})")
    st, sh, sw = stride
    pt, ph, pw = padding
    if min(st, sh, sw) < 1 or min(pt, ph, pw) < 0:
        raise ShapeError("conv3d: strides must be >= 1 and paddings >= 0")
    tpad = (kt - 1, 0) if causal_time else (pt, pt)
    if tt + sum(tpad) < kt or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError("conv3d: padded input smaller than kernel on some axis")

    to = (tt + sum(tpad) - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    pads = ((0, 0), (0, 0), tpad, _pair(ph), _pair(pw))
    xp = np.pad(x.data, pads) if any(sum(p) for p in pads) else x.data
    patches = _patches3d(xp, kt, kh, kw, st, sh, sw, to, ho, wo)
    data = np.tensordot(patches, kernel.data, axes=((1, 2, 3, 4), (1, 2, 3, 4)))
    data = np.ascontiguousarray(data.transpose(0, 4, 1, 2, 3))
    _guard(data, "conv3d")
    out = Tensor._wrap(data)
    saved = xp.nbytes if xp is not x.data else 0

    def bwd(g):
        gx = None
        if x.requires_grad:
            tn = np.tensordot(g, kernel.data, axes=((1,), (0,)))  # [N,to,ho,wo,C,kt,kh,kw]
            tn = np.ascontiguousarray(tn.transpose(0, 4, 1, 2, 3, 5, 6, 7))
            full = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        full[:, :, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                            tn[..., i, j, k]
            gx = np.ascontiguousarray(
                full[:, :, tpad[0]:tpad[0] + tt, ph:ph + h, pw:pw + w])
        gk = None
        if kernel.requires_grad:
            p = _patches3d(xp, kt, kh, kw, st, sh, sw, to, ho, wo)
            gk = np.tensordot(g, p, axes=((0, 2, 3, 4), (0, 5, 6, 7)))
        return gx, gk

    return _record(out, (x, kernel), bwd, saved_bytes=saved)
