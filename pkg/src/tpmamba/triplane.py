"""Tri-plane state-space adapter.

Takes a stack of per-slice feature maps (B*D, C, h, w), reduces the channel
width to a small rank r with a depth-wise (k,1,1) convolution, widens the
depth receptive field with four parallel dilated convolutions, scans the
volume as flattened sequences along the height-width, depth-width and
depth-height planes with three independent scanner blocks, sums the three
plane contributions, raises the width back to C and adds the result onto the
input.  The raise convolution is zero-initialised so a fresh adapter is the
identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import conv3d, same_padding
from .ssm import MambaBlockConfig, SSMParams, mamba_block_forward, param_count_ssm
from .tensor import Parameter, Tensor, add, concat, permute, reshape, uniform_init

SCAN_MODES = ("tri_plane", "hw_only", "dw_only", "dh_only", "volume_flatten")
CONV_MODES = ("multiscale", "single")
PLANES = ("hw", "dh", "dw", "volume")


@dataclass
class TPMambaConfig:
    """Adapter hyper-parameters; defaults follow the production settings."""

    C: int
    r: int
    dilations: tuple = (1, 2, 4, 8)
    depth_kernel: int = 3
    scan_mode: str = "tri_plane"
    conv_mode: str = "multiscale"
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: Optional[int] = None

    def __post_init__(self):
        if self.scan_mode not in SCAN_MODES:
            raise ConfigError(f"unknown scan_mode {self.scan_mode!r}; choose from {SCAN_MODES}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"unknown conv_mode {self.conv_mode!r}; choose from {CONV_MODES}")
        if self.depth_kernel % 2 == 0:
            raise ConfigError(f"depth_kernel must be odd, got {self.depth_kernel}")
        if self.conv_mode == "multiscale" and self.r % len(self.dilations) != 0:
            raise ConfigError(
                f"rank {self.r} not divisible by the {len(self.dilations)} dilated branches"
            )
        if self.C <= 0 or self.r <= 0:
            raise ConfigError("C and r must be positive")

    def ssm_config(self) -> MambaBlockConfig:
        return MambaBlockConfig(
            d_model=self.r,
            d_state=self.d_state,
            expand=self.expand,
            d_conv=self.d_conv,
            dt_rank=self.dt_rank,
        )


@dataclass
class TPMambaAdapter:
    cfg: TPMambaConfig
    reduce_w: Parameter
    reduce_b: Parameter
    branch_ws: list = field(default_factory=list)
    branch_bs: list = field(default_factory=list)
    phi_hw: SSMParams = None
    phi_dw: SSMParams = None
    phi_dh: SSMParams = None
    raise_w: Parameter = None
    raise_b: Parameter = None

    @classmethod
    def init(
        cls, cfg: TPMambaConfig, rng: np.random.Generator, prefix: str, dtype=np.float32
    ) -> "TPMambaAdapter":
        C, r, k = cfg.C, cfg.r, cfg.depth_kernel

        def par(name, data):
            return Parameter(f"{prefix}.{name}", data, trainable=True, dtype=dtype)

        branch_ws, branch_bs = [], []
        if cfg.conv_mode == "multiscale":
            rb = r // len(cfg.dilations)
            for i, d in enumerate(cfg.dilations):
                branch_ws.append(
                    par(f"branch{i}_d{d}.weight", uniform_init(rng, (rb, r, k, 1, 1), r * k, dtype))
                )
                branch_bs.append(par(f"branch{i}_d{d}.bias", uniform_init(rng, (rb,), r * k, dtype)))
        else:
            branch_ws.append(par("branch_single.weight", uniform_init(rng, (r, r, k, 1, 1), r * k, dtype)))
            branch_bs.append(par("branch_single.bias", uniform_init(rng, (r,), r * k, dtype)))

        ssm_cfg = cfg.ssm_config()
        return cls(
            cfg=cfg,
            reduce_w=par("reduce.weight", uniform_init(rng, (r, C, k, 1, 1), C * k, dtype)),
            reduce_b=par("reduce.bias", uniform_init(rng, (r,), C * k, dtype)),
            branch_ws=branch_ws,
            branch_bs=branch_bs,
            phi_hw=SSMParams.init(ssm_cfg, rng, f"{prefix}.phi_hw", dtype=dtype),
            phi_dw=SSMParams.init(ssm_cfg, rng, f"{prefix}.phi_dw", dtype=dtype),
            phi_dh=SSMParams.init(ssm_cfg, rng, f"{prefix}.phi_dh", dtype=dtype),
            # zero raise conv: a fresh adapter leaves the backbone untouched
            raise_w=par("raise.weight", np.zeros((C, r, k, 1, 1), dtype=dtype)),
            raise_b=par("raise.bias", np.zeros((C,), dtype=dtype)),
        )

    def parameters(self) -> list[Parameter]:
        out = [self.reduce_w, self.reduce_b]
        out.extend(self.branch_ws)
        out.extend(self.branch_bs)
        for phi in (self.phi_hw, self.phi_dw, self.phi_dh):
            out.extend(phi.parameters())
        out.extend([self.raise_w, self.raise_b])
        return out


def param_count_adapter(cfg: TPMambaConfig) -> int:
    """Exact parameter count: reduce + dilated branches + 3 scanners + raise."""
    C, r, k = cfg.C, cfg.r, cfg.depth_kernel
    n = len(cfg.dilations) if cfg.conv_mode == "multiscale" else 1
    rb = r // n
    branches = n * (k * r * rb + rb)
    return (k * C * r + r) + branches + 3 * param_count_ssm(cfg.ssm_config()) + (k * r * C + C)


def reduce_dim(F: Tensor, adapter: TPMambaAdapter) -> Tensor:
    """(B,C,D,h,w) -> (B,r,D,h,w) with a depth-only same-padded conv."""
    cfg = adapter.cfg
    if F.shape[1] != cfg.C:
        raise ShapeError(f"input width {F.shape[1]} != configured C {cfg.C}")
    pad = same_padding(cfg.depth_kernel, 1)
    return conv3d(F, adapter.reduce_w, adapter.reduce_b, padding=(pad, 0, 0))


def multiscale_depth_conv(G: Tensor, adapter: TPMambaAdapter) -> Tensor:
    """Four parallel dilated depth convs, concatenated in dilation order."""
    cfg = adapter.cfg
    if cfg.conv_mode == "single":
        pad = same_padding(cfg.depth_kernel, 1)
        return conv3d(G, adapter.branch_ws[0], adapter.branch_bs[0], padding=(pad, 0, 0))
    outs = []
    for w, b, d in zip(adapter.branch_ws, adapter.branch_bs, cfg.dilations):
        pad = same_padding(cfg.depth_kernel, d)
        outs.append(conv3d(G, w, b, dilation=(d, 1, 1), padding=(pad, 0, 0)))
    return concat(outs, axis=1)


def plane_flatten(G: Tensor, mode: str) -> Tensor:
    """Flatten (B,r,D,h,w) into channel-last sequences along one plane.

    hw: (B*D, h*w, r) row-major in (h,w); dh: (B*w, D*h, r); dw: (B*h, D*w, r);
    volume: (B, D*h*w, r) scanning depth, then rows, then columns.
    """
    B, r, D, h, w = G.shape
    if mode == "hw":
        return reshape(permute(G, (0, 2, 3, 4, 1)), (B * D, h * w, r))
    if mode == "dh":
        return reshape(permute(G, (0, 4, 2, 3, 1)), (B * w, D * h, r))
    if mode == "dw":
        return reshape(permute(G, (0, 3, 2, 4, 1)), (B * h, D * w, r))
    if mode == "volume":
        return reshape(permute(G, (0, 2, 3, 4, 1)), (B, D * h * w, r))
    raise ConfigError(f"unknown plane mode {mode!r}; choose from {PLANES}")


def plane_unflatten(seq: Tensor, mode: str, dims: tuple) -> Tensor:
    """Exact inverse of `plane_flatten` for matching mode and (B,r,D,h,w)."""
    B, r, D, h, w = dims
    if mode == "hw":
        expect = (B * D, h * w, r)
        back = (0, 4, 1, 2, 3)
        mid = (B, D, h, w, r)
    elif mode == "dh":
        expect = (B * w, D * h, r)
        back = (0, 4, 2, 3, 1)
        mid = (B, w, D, h, r)
    elif mode == "dw":
        expect = (B * h, D * w, r)
        back = (0, 4, 2, 1, 3)
        mid = (B, h, D, w, r)
    elif mode == "volume":
        expect = (B, D * h * w, r)
        back = (0, 4, 1, 2, 3)
        mid = (B, D, h, w, r)
    else:
        raise ConfigError(f"unknown plane mode {mode!r}; choose from {PLANES}")
    if tuple(seq.shape) != expect:
        raise ShapeError(f"sequence shape {seq.shape} does not match {mode} layout {expect}")
    return permute(reshape(seq, mid), back)


_MODE_PLANES = {
    "tri_plane": ("hw", "dw", "dh"),
    "hw_only": ("hw",),
    "dw_only": ("dw",),
    "dh_only": ("dh",),
    "volume_flatten": ("volume",),
}


def scan_stage(G: Tensor, adapter: TPMambaAdapter, mode: Optional[str] = None) -> Tensor:
    """Plane scans of (B,r,D,h,w); tri_plane sums hw + dw + dh contributions.

    The volume_flatten variant reuses the hw scanner on the fully flattened
    sequence (it is a single-scan ablation, not a fourth parameter set).
    """
    cfg = adapter.cfg
    mode = mode if mode is not None else cfg.scan_mode
    dims = tuple(G.shape)
    scanners = {"hw": adapter.phi_hw, "dw": adapter.phi_dw, "dh": adapter.phi_dh,
                "volume": adapter.phi_hw}
    out = None
    for plane in _MODE_PLANES[mode]:
        seq = plane_flatten(G, plane)
        scanned = mamba_block_forward(seq, scanners[plane])
        contrib = plane_unflatten(scanned, plane, dims)
        out = contrib if out is None else add(out, contrib)
    return out


def raise_dim(G: Tensor, adapter: TPMambaAdapter) -> Tensor:
    pad = same_padding(adapter.cfg.depth_kernel, 1)
    return conv3d(G, adapter.raise_w, adapter.raise_b, padding=(pad, 0, 0))


def tp_mamba_forward(F: Tensor, adapter: TPMambaAdapter, dims: tuple) -> Tensor:
    """Full adapter on slice-stacked features (B*D, C, h, w); residual output."""
    B, D = dims
    BD, C, h, w = F.shape
    if BD != B * D:
        raise ShapeError(f"leading extent {BD} != B*D = {B}*{D}")
    vol = permute(reshape(F, (B, D, C, h, w)), (0, 2, 1, 3, 4))
    G = reduce_dim(vol, adapter)
    G = multiscale_depth_conv(G, adapter)
    G = scan_stage(G, adapter)
    out = raise_dim(G, adapter)
    out = reshape(permute(out, (0, 2, 1, 3, 4)), (BD, C, h, w))
    return add(F, out)
