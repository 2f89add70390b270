"""Decoder, training loss, evaluation metric and sliding-window inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .ops import conv3d, normalize, one_hot, upsample_hw
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    div,
    gelu,
    log_softmax,
    mul,
    neg,
    permute,
    reshape,
    scale,
    softmax,
    tmean,
    tsum,
    uniform_init,
)

DICE_EPS = 1e-5


@dataclass
class DecoderConfig:
    """Four conv+norm+GELU+upsample stages recover the patch-downsampled H,W.

    Depth is never downsampled by the slice-wise encoder, so only H and W are
    upsampled; the k=3 stage convolutions provide inter-slice mixing.  Stage
    widths taper so the decoder stays small next to the frozen backbone.
    """

    C: int
    K: int
    stages: int = 4
    stage_widths: Optional[tuple] = None
    patch: int = 16

    def __post_init__(self):
        if 2**self.stages != self.patch:
            raise ConfigError(
                f"2^stages must equal the patch size: 2^{self.stages} != {self.patch}"
            )
        if self.K < 2:
            raise ConfigError(f"need at least 2 classes, got K={self.K}")
        if self.stage_widths is None:
            c = self.C
            # floor of 4 keeps tiny toy widths from collapsing to 1 channel
            self.stage_widths = (
                max(c // 2, 4),
                max(c // 4, 4),
                max(c // 8, 4),
                max(c // 16, 4),
            )
        if len(self.stage_widths) != self.stages:
            raise ConfigError("stage_widths must list one width per stage")


@dataclass
class Decoder:
    cfg: DecoderConfig
    reduce_w: Parameter
    reduce_b: Parameter
    stage_ws: list = field(default_factory=list)
    stage_bs: list = field(default_factory=list)
    in_gs: list = field(default_factory=list)
    in_bs: list = field(default_factory=list)
    head_w: Parameter = None
    head_b: Parameter = None

    @classmethod
    def init(cls, cfg: DecoderConfig, rng, dtype=np.float32, prefix="decoder"):
        widths = cfg.stage_widths

        def par(name, data):
            return Parameter(f"{prefix}.{name}", data, trainable=True, dtype=dtype)

        dec = cls(
            cfg=cfg,
            reduce_w=par("reduce.weight", uniform_init(rng, (widths[0], 4 * cfg.C, 1, 1, 1), 4 * cfg.C, dtype)),
            reduce_b=par("reduce.bias", uniform_init(rng, (widths[0],), 4 * cfg.C, dtype)),
        )
        for i in range(cfg.stages):
            cin = widths[i]
            cout = widths[min(i + 1, cfg.stages - 1)]
            fan = cin * 27
            dec.stage_ws.append(par(f"stage{i}.conv.weight", uniform_init(rng, (cout, cin, 3, 3, 3), fan, dtype)))
            dec.stage_bs.append(par(f"stage{i}.conv.bias", uniform_init(rng, (cout,), fan, dtype)))
            dec.in_gs.append(par(f"stage{i}.norm.gamma", np.ones(cout, dtype=dtype)))
            dec.in_bs.append(par(f"stage{i}.norm.beta", np.zeros(cout, dtype=dtype)))
        last = widths[-1]
        dec.head_w = par("head.weight", uniform_init(rng, (cfg.K, last, 1, 1, 1), last, dtype))
        dec.head_b = par("head.bias", uniform_init(rng, (cfg.K,), last, dtype))
        return dec

    def parameters(self) -> list[Parameter]:
        out = [self.reduce_w, self.reduce_b]
        for i in range(self.cfg.stages):
            out += [self.stage_ws[i], self.stage_bs[i], self.in_gs[i], self.in_bs[i]]
        out += [self.head_w, self.head_b]
        return out


def decoder_forward(taps: list[Tensor], dims: tuple, dec: Decoder) -> Tensor:
    """Fuse 4 encoder taps (B*D,C,h,w) into full-resolution logits."""
    B, D = dims
    if len(taps) != 4:
        raise ShapeError(f"decoder expects 4 taps, got {len(taps)}")
    shapes = {tuple(t.shape) for t in taps}
    if len(shapes) != 1:
        raise ShapeError(f"tap shapes differ: {sorted(shapes)}")
    BD, C, h, w = taps[0].shape
    if BD != B * D:
        raise ShapeError(f"tap leading extent {BD} != B*D = {B}*{D}")
    vols = [permute(reshape(t, (B, D, C, h, w)), (0, 2, 1, 3, 4)) for t in taps]
    x = concat(vols, axis=1)  # (B, 4C, D, h, w)
    x = conv3d(x, dec.reduce_w, dec.reduce_b)
    for i in range(dec.cfg.stages):
        x = conv3d(x, dec.stage_ws[i], dec.stage_bs[i], padding=(1, 1, 1))
        x = normalize(x, "instance_norm", dec.in_gs[i], dec.in_bs[i])
        x = gelu(x)
        x = upsample_hw(x, 2)
    return conv3d(x, dec.head_w, dec.head_b)


def dice_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy plus soft Dice, both over all voxels of the batch.

    The Dice average includes the background class during training; the
    evaluation metric below excludes it.
    """
    B, K = logits.shape[0], logits.shape[1]
    if labels.shape != (B,) + tuple(logits.shape[2:]):
        raise ShapeError(f"labels shape {labels.shape} incompatible with logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise InputError(f"labels must lie in [0, {K - 1}], got max {labels.max()}")
    y = one_hot(labels.astype(np.int64), K, axis=1, dtype=logits.data.dtype)

    ls = log_softmax(logits, axis=1)
    ce = neg(tmean(tsum(mul(ls, y), axis=1)))

    p = softmax(logits, axis=1)
    red_axes = (0,) + tuple(range(2, logits.ndim))
    inter = tsum(mul(p, y), axis=red_axes)  # (K,)
    psum = tsum(p, axis=red_axes)
    ysum = tsum(y, axis=red_axes)
    eps = Tensor(np.full(K, DICE_EPS, dtype=logits.data.dtype))
    numer = add(scale(inter, 2.0), eps)
    denom = add(add(psum, ysum), eps)
    dice = tmean(div(numer, denom))
    one = Tensor(np.ones((), dtype=logits.data.dtype))
    return add(ce, add(one, neg(dice)))


def dice_score(pred: np.ndarray, gt: np.ndarray, K: int) -> tuple[np.ndarray, float]:
    """Hard per-class Dice for classes 1..K-1 plus their mean.

    Convention: both masks empty -> 1.0, exactly one empty -> 0.0, so small
    structures on crops keep a defined score.  Background is excluded.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != labels shape {gt.shape}")
    scores = np.zeros(K - 1, dtype=np.float64)
    for k in range(1, K):
        p = pred == k
        g = gt == k
        ps, gs = int(p.sum()), int(g.sum())
        if ps == 0 and gs == 0:
            scores[k - 1] = 1.0
        elif ps == 0 or gs == 0:
            scores[k - 1] = 0.0
        else:
            scores[k - 1] = 2.0 * int((p & g).sum()) / (ps + gs)
    return scores, float(scores.mean())


@dataclass
class SegmentationOutput:
    logits: np.ndarray  # (1, K, D, H, W)
    probabilities: np.ndarray  # softmax of logits over K
    labels: np.ndarray  # argmax over K, (1, D, H, W)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def _window_starts(extent: int, win: int, stride: int) -> list[int]:
    """Stride-spaced starts with the final window snapped to the boundary."""
    if extent <= win:
        return [0]
    starts = list(range(0, extent - win + 1, stride))
    if starts[-1] != extent - win:
        starts.append(extent - win)
    return starts


def gaussian_importance(window: tuple, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian weight map, sigma = extent * sigma_scale per axis."""
    axes = []
    for n in window:
        center = (n - 1) / 2.0
        sigma = max(n * sigma_scale, 1e-8)
        ax = np.exp(-0.5 * ((np.arange(n) - center) / sigma) ** 2)
        axes.append(ax)
    out = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return (out / out.max()).astype(np.float64)


def sliding_window_infer(
    volume: np.ndarray,
    model: Callable[[np.ndarray], np.ndarray],
    window: tuple = (96, 96, 96),
    overlap: float = 0.5,
) -> SegmentationOutput:
    """Cover (1,1,D,H,W) with overlapping windows, Gaussian-blend the logits.

    `model` maps a (1,1,d,h,w) window to (1,K,d,h,w) logits.  Windows are
    visited in a fixed order so accumulation is deterministic.  Volumes
    smaller than the window are padded symmetrically with their minimum
    intensity and cropped back afterwards.
    """
    if volume.ndim != 5 or volume.shape[0] != 1 or volume.shape[1] != 1:
        raise InputError(f"expected volume of shape (1,1,D,H,W), got {volume.shape}")
    if volume.size == 0:
        raise InputError("empty volume")
    D, H, W = volume.shape[2:]
    pads = []
    for ext, win in zip((D, H, W), window):
        short = max(win - ext, 0)
        pads.append((short // 2, short - short // 2))
    padded = np.pad(
        volume,
        ((0, 0), (0, 0)) + tuple(pads),
        mode="constant",
        constant_values=float(volume.min()),
    )
    pD, pH, pW = padded.shape[2:]
    stride = tuple(max(int(round(w * (1.0 - overlap))), 1) for w in window)
    weight = gaussian_importance(window)

    acc: Optional[np.ndarray] = None
    norm = np.zeros((pD, pH, pW), dtype=np.float64)
    for zs in _window_starts(pD, window[0], stride[0]):
        for ys in _window_starts(pH, window[1], stride[1]):
            for xs in _window_starts(pW, window[2], stride[2]):
                patch = padded[:, :, zs : zs + window[0], ys : ys + window[1], xs : xs + window[2]]
                logits = np.asarray(model(patch))
                if acc is None:
                    acc = np.zeros((logits.shape[1], pD, pH, pW), dtype=np.float64)
                region = (
                    slice(zs, zs + window[0]),
                    slice(ys, ys + window[1]),
                    slice(xs, xs + window[2]),
                )
                acc[(slice(None),) + region] += logits[0] * weight
                norm[region] += weight
    blended = acc / norm
    blended = blended[None, :, pads[0][0] : pads[0][0] + D, pads[1][0] : pads[1][0] + H, pads[2][0] : pads[2][0] + W]
    probs = _softmax_np(blended, axis=1)
    return SegmentationOutput(
        logits=blended,
        probabilities=probs,
        labels=blended.argmax(axis=1),
    )
