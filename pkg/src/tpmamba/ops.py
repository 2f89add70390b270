"""Structured operations: convolutions, normalization, upsampling, grad check.

All convolutions use the cross-correlation convention (no kernel flip),
stride 1, and zero padding.  Forward/backward passes are expressed as a small
number of numpy contractions per kernel tap, which keeps them BLAS-backed.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Parameter, Tensor, _record, as_value, recording

Array = np.ndarray


def same_padding(kernel: int, dilation: int) -> int:
    """Padding that preserves extent at stride 1; requires an odd kernel."""
    if kernel % 2 == 0:
        raise ConfigError(f"'same' padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def conv3d(
    x: Tensor,
    weight,
    bias=None,
    dilation: tuple = (1, 1, 1),
    padding: tuple = (0, 0, 0),
) -> Tensor:
    """3-D cross-correlation, x (B,Cin,D,H,W) with weight (Cout,Cin,kd,kh,kw)."""
    x, weight = as_value(x), as_value(weight)
    bias = as_value(bias) if bias is not None else None
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D operands, got {x.shape} and {weight.shape}")
    B, cin, D, H, W = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv3d channel mismatch: input {cin} vs weight {cin_w}")
    dd, dh, dw = dilation
    pd, ph, pw = padding
    od = D + 2 * pd - dd * (kd - 1)
    oh = H + 2 * ph - dh * (kh - 1)
    ow = W + 2 * pw - dw * (kw - 1)
    if min(od, oh, ow) <= 0:
        raise ShapeError(f"conv3d output extent would be non-positive: ({od},{oh},{ow})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    taps = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]

    def tap_slice(i, j, k):
        return (
            slice(None),
            slice(None),
            slice(i * dd, i * dd + od),
            slice(j * dh, j * dh + oh),
            slice(k * dw, k * dw + ow),
        )

    acc = np.zeros((cout, B, od, oh, ow), dtype=x.data.dtype)
    for i, j, k in taps:
        acc += np.tensordot(weight.data[:, :, i, j, k], xp[tap_slice(i, j, k)], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1, 1)

    def backward(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for i, j, k in taps:
            xs = xp[tap_slice(i, j, k)]
            gw[:, :, i, j, k] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            contrib = np.tensordot(weight.data[:, :, i, j, k], g, axes=([0], [1]))
            gxp[tap_slice(i, j, k)] += np.moveaxis(contrib, 0, 1)
        gx = gxp[:, :, pd : pd + D, ph : ph + H, pw : pw + W]
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3, 4))
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, backward)


def conv1d_depthwise(x: Tensor, weight, bias=None) -> Tensor:
    """Causal per-channel 1-D convolution: x (B,E,L), weight (E,k), left pad k-1."""
    x, weight = as_value(x), as_value(weight)
    bias = as_value(bias) if bias is not None else None
    if x.ndim != 3:
        raise ShapeError(f"conv1d_depthwise expects (B,E,L), got {x.shape}")
    w = weight.data
    if w.ndim == 3:  # accept (E,1,k) layout
        w = w[:, 0, :]
    B, E, L = x.shape
    if w.shape[0] != E:
        raise ShapeError(f"conv1d_depthwise channel mismatch: input {E} vs weight {w.shape[0]}")
    k = w.shape[1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (k - 1, 0)))
    out = np.zeros_like(x.data)
    for i in range(k):
        out += w[None, :, i : i + 1] * xp[:, :, i : i + L]
    if bias is not None:
        out += bias.data.reshape(1, E, 1)

    def backward(g):
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp)
        for i in range(k):
            gw[:, i] = (g * xp[:, :, i : i + L]).sum(axis=(0, 2))
            gxp[:, :, i : i + L] += w[None, :, i : i + 1] * g
        gx = gxp[:, :, k - 1 :]
        gw_full = gw if weight.data.ndim == 2 else gw[:, None, :]
        if bias is not None:
            return gx, gw_full, g.sum(axis=(0, 2))
        return gx, gw_full

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(inputs, out, backward)


def normalize(
    x: Tensor,
    kind: str,
    gamma,
    beta,
    eps: float = 1e-5,
) -> Tensor:
    """layer_norm over the last axis, or instance_norm over spatial axes per (B,C)."""
    x, gamma, beta = as_value(x), as_value(gamma), as_value(beta)
    if eps <= 0:
        raise ConfigError(f"normalize needs eps > 0, got {eps}")
    if kind == "layer_norm":
        axes: tuple = (x.ndim - 1,)
        affine_shape = (x.shape[-1],)
    elif kind == "instance_norm":
        if x.ndim < 3:
            raise ShapeError(f"instance_norm expects (B,C,spatial...), got {x.shape}")
        axes = tuple(range(2, x.ndim))
        affine_shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    else:
        raise ConfigError(f"unknown normalization kind {kind!r}")

    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    gam = gamma.data.reshape(affine_shape)
    out = xhat * gam + beta.data.reshape(affine_shape)
    n = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        gg = g * gam
        # standard layer-norm vjp over the normalized axes
        t1 = gg.sum(axis=axes, keepdims=True)
        t2 = (gg * xhat).sum(axis=axes, keepdims=True)
        gx = (inv / n) * (n * gg - t1 - xhat * t2)
        reduce_axes = tuple(i for i in range(x.ndim) if i not in (1,)) if kind == "instance_norm" else tuple(range(x.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx.astype(x.data.dtype), ggamma.reshape(gamma.shape), gbeta.reshape(beta.shape)

    return _record((x, gamma, beta), out, backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> Array:
    """Row-stochastic linear interpolation matrix mapping length n_in -> n_out.

    Output sample o reads the input at (o + 0.5) * (n_in - 1) / n_out, the
    half-pixel output grid mapped onto the input span; rows mix at most two
    neighbouring inputs and always sum to one.
    """
    M = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in - 1) / n_out
    lo = np.floor(src).astype(int)
    frac = src - lo
    hi = np.minimum(lo + 1, n_in - 1)
    M[np.arange(n_out), lo] += (1.0 - frac).astype(dtype)
    M[np.arange(n_out), hi] += frac.astype(dtype)
    return M


def upsample_hw(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of H and W by an integer factor; depth untouched."""
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if x.ndim != 5:
        raise ShapeError(f"upsample_hw expects (B,C,D,H,W), got {x.shape}")
    B, C, D, H, W = x.shape
    Mh = _interp_matrix(H, factor * H, x.data.dtype)
    Mw = _interp_matrix(W, factor * W, x.data.dtype)
    t = np.einsum("ph,bcdhw->bcdpw", Mh, x.data, optimize=True)
    out = np.einsum("qw,bcdpw->bcdpq", Mw, t, optimize=True)

    def backward(g):
        gt = np.einsum("qw,bcdpq->bcdpw", Mw, g, optimize=True)
        gx = np.einsum("ph,bcdpw->bcdhw", Mh, gt, optimize=True)
        return (gx,)

    return _record((x,), out, backward)


def one_hot(labels: Array, num_classes: int, axis: int = 1, dtype=np.float32) -> Tensor:
    """Constant one-hot encoding of an integer label array."""
    eye = np.eye(num_classes, dtype=dtype)
    oh = eye[labels]  # (..., K)
    oh = np.moveaxis(oh, -1, axis)
    return Tensor(np.ascontiguousarray(oh))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-4,
    max_coords: int = 16,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must rebuild the scalar loss from the current parameter values on
    every call.  Run at f64; f32 finite differences are too noisy to trust.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    trainables = [p for p in params if p.trainable]
    for p in trainables:
        p.zero_grad()
    with recording() as tape:
        loss = f()
    if loss.size != 1:
        raise ShapeError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is non-finite")
    tape.backward(loss)

    worst = 0.0
    for p in trainables:
        if p.grad is None:
            raise NumericError(f"grad_check: no gradient reached parameter {p.name}")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"grad_check: non-finite gradient in {p.name}")
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        gflat = p.grad.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f().data)
            flat[c] = orig - h
            fm = float(f().data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite perturbed loss at {p.name}[{c}]")
            numeric = (fp - fm) / (2 * h)
            analytic = float(gflat[c])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
