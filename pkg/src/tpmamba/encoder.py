"""Slice-as-batch ViT encoder with low-rank attention adapters.

The 3D input (B,1,D,H,W) is reshaped to (B*D,1,H,W) so a 2D patch embedding
and 2D attention process depth slices as batch entries; depth mixing happens
only inside the tri-plane adapters appended to each block.  The backbone
(patch embed, positional embedding, attention, MLP, norms) is frozen; only
the LoRA factors and the adapters train.  Both start at exact zero
contribution, so a freshly adapted encoder is bit-identical to the frozen
one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import normalize
from .tensor import (
    Parameter,
    Tensor,
    add,
    gelu,
    linear,
    matmul,
    permute,
    reshape,
    scale,
    softmax,
    uniform_init,
)
from .triplane import TPMambaAdapter, TPMambaConfig, tp_mamba_forward


@dataclass
class ViTConfig:
    """Encoder hyper-parameters; toy defaults keep f64 grad checks fast."""

    C: int = 96
    patch: int = 16
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0
    adapter: Optional[TPMambaConfig] = None
    n_outputs: int = 4
    img_hw: tuple = (96, 96)

    def __post_init__(self):
        if self.C % self.n_heads != 0:
            raise ConfigError(f"C={self.C} not divisible by n_heads={self.n_heads}")
        if self.n_blocks < self.n_outputs:
            raise ConfigError(
                f"n_blocks={self.n_blocks} must be >= n_outputs={self.n_outputs}"
            )
        for ext in self.img_hw:
            if ext % self.patch != 0:
                raise ConfigError(f"image extent {ext} not divisible by patch {self.patch}")
        if self.adapter is None:
            self.adapter = TPMambaConfig(C=self.C, r=24)
        if self.adapter.C != self.C:
            raise ConfigError(
                f"adapter width {self.adapter.C} must equal encoder width {self.C}"
            )


@dataclass
class LoRALinear:
    """Frozen linear map plus a trainable rank-r correction B@(A@x)*alpha/r."""

    w_base: Parameter
    b_base: Parameter
    a_lora: Parameter
    b_lora: Parameter
    scale: float

    @classmethod
    def init(cls, rng, prefix, out_dim, in_dim, rank, alpha, dtype=np.float32):
        return cls(
            w_base=Parameter(f"{prefix}.weight", uniform_init(rng, (out_dim, in_dim), in_dim, dtype), trainable=False),
            b_base=Parameter(f"{prefix}.bias", uniform_init(rng, (out_dim,), in_dim, dtype), trainable=False),
            a_lora=Parameter(f"{prefix}.lora_a", uniform_init(rng, (rank, in_dim), in_dim, dtype)),
            b_lora=Parameter(f"{prefix}.lora_b", np.zeros((out_dim, rank), dtype=dtype)),
            scale=alpha / rank,
        )

    def __call__(self, x: Tensor) -> Tensor:
        base = linear(x, self.w_base, self.b_base)
        delta = linear(linear(x, self.a_lora), self.b_lora)
        return add(base, scale(delta, self.scale))

    def parameters(self):
        return [self.w_base, self.b_base, self.a_lora, self.b_lora]

    def trainable_parameters(self):
        return [self.a_lora, self.b_lora]


@dataclass
class FrozenLinear:
    weight: Parameter
    bias: Parameter

    @classmethod
    def init(cls, rng, prefix, out_dim, in_dim, dtype=np.float32):
        return cls(
            weight=Parameter(f"{prefix}.weight", uniform_init(rng, (out_dim, in_dim), in_dim, dtype), trainable=False),
            bias=Parameter(f"{prefix}.bias", uniform_init(rng, (out_dim,), in_dim, dtype), trainable=False),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class ViTBlock:
    cfg: ViTConfig
    ln1_g: Parameter
    ln1_b: Parameter
    q: LoRALinear
    k: FrozenLinear
    v: LoRALinear
    out: FrozenLinear
    ln2_g: Parameter
    ln2_b: Parameter
    mlp1: FrozenLinear
    mlp2: FrozenLinear
    adapter: TPMambaAdapter

    @classmethod
    def init(cls, cfg: ViTConfig, rng, prefix, dtype=np.float32):
        C = cfg.C

        def frozen(name, data):
            return Parameter(f"{prefix}.{name}", data, trainable=False, dtype=dtype)

        return cls(
            cfg=cfg,
            ln1_g=frozen("ln1.gamma", np.ones(C, dtype=dtype)),
            ln1_b=frozen("ln1.beta", np.zeros(C, dtype=dtype)),
            q=LoRALinear.init(rng, f"{prefix}.attn.q", C, C, cfg.lora_rank, cfg.lora_alpha, dtype),
            k=FrozenLinear.init(rng, f"{prefix}.attn.k", C, C, dtype),
            v=LoRALinear.init(rng, f"{prefix}.attn.v", C, C, cfg.lora_rank, cfg.lora_alpha, dtype),
            out=FrozenLinear.init(rng, f"{prefix}.attn.out", C, C, dtype),
            ln2_g=frozen("ln2.gamma", np.ones(C, dtype=dtype)),
            ln2_b=frozen("ln2.beta", np.zeros(C, dtype=dtype)),
            mlp1=FrozenLinear.init(rng, f"{prefix}.mlp.fc1", cfg.mlp_ratio * C, C, dtype),
            mlp2=FrozenLinear.init(rng, f"{prefix}.mlp.fc2", C, cfg.mlp_ratio * C, dtype),
            adapter=TPMambaAdapter.init(cfg.adapter, rng, f"{prefix}.tpmamba", dtype),
        )

    def parameters(self):
        out = [self.ln1_g, self.ln1_b]
        out += self.q.parameters() + self.k.parameters()
        out += self.v.parameters() + self.out.parameters()
        out += [self.ln2_g, self.ln2_b]
        out += self.mlp1.parameters() + self.mlp2.parameters()
        out += self.adapter.parameters()
        return out


@dataclass
class Encoder:
    cfg: ViTConfig
    patch_w: Parameter
    patch_b: Parameter
    pos: Parameter
    blocks: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> "Encoder":
        p, C = cfg.patch, cfg.C
        h0, w0 = cfg.img_hw[0] // p, cfg.img_hw[1] // p
        enc = cls(
            cfg=cfg,
            patch_w=Parameter("patch_embed.weight", uniform_init(rng, (C, p * p), p * p, dtype), trainable=False),
            patch_b=Parameter("patch_embed.bias", uniform_init(rng, (C,), p * p, dtype), trainable=False),
            pos=Parameter("pos_embed", (0.02 * rng.standard_normal((1, C, h0, w0))).astype(dtype), trainable=False),
            blocks=[ViTBlock.init(cfg, rng, f"block{i}", dtype) for i in range(cfg.n_blocks)],
        )
        return enc

    def parameters(self):
        out = [self.patch_w, self.patch_b, self.pos]
        for blk in self.blocks:
            out += blk.parameters()
        return out


def patch_embed_slices(X: Tensor, enc: Encoder) -> Tensor:
    """(B,1,D,H,W) -> (B*D, C, h, w) via non-overlapping patch projection."""
    cfg = enc.cfg
    B, one, D, H, W = X.shape
    p = cfg.patch
    if one != 1:
        raise ShapeError(f"expected a single input channel, got {one}")
    if H % p or W % p:
        raise ShapeError(f"H={H}, W={W} must be divisible by patch {p}")
    h, w = H // p, W // p
    x = reshape(X, (B * D, h, p, w, p))
    x = permute(x, (0, 1, 3, 2, 4))  # (BD, h, w, p, p)
    x = reshape(x, (B * D, h, w, p * p))
    x = linear(x, enc.patch_w, enc.patch_b)  # (BD, h, w, C)
    return permute(x, (0, 3, 1, 2))


def mhsa_lora(tokens: Tensor, blk: ViTBlock) -> Tensor:
    """Multi-head self-attention over (BD, T, C) tokens; LoRA on Q and V."""
    cfg = blk.cfg
    BD, Tn, C = tokens.shape
    nh = cfg.n_heads
    hd = C // nh

    def heads(x):
        return permute(reshape(x, (BD, Tn, nh, hd)), (0, 2, 1, 3))

    q = heads(blk.q(tokens))
    k = heads(blk.k(tokens))
    v = heads(blk.v(tokens))
    att = softmax(scale(matmul(q, permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)), axis=3)
    ctx = matmul(att, v)  # (BD, nh, T, hd)
    merged = reshape(permute(ctx, (0, 2, 1, 3)), (BD, Tn, C))
    return blk.out(merged)


def vit_block_forward(F: Tensor, blk: ViTBlock, dims: tuple, adapters_enabled: bool = True) -> Tensor:
    """Pre-norm block: attention and MLP residuals, then the volume adapter."""
    BD, C, h, w = F.shape
    x = permute(reshape(F, (BD, C, h * w)), (0, 2, 1))  # tokens (BD, hw, C)
    x = add(x, mhsa_lora(normalize(x, "layer_norm", blk.ln1_g, blk.ln1_b), blk))
    y = normalize(x, "layer_norm", blk.ln2_g, blk.ln2_b)
    y = blk.mlp2(gelu(blk.mlp1(y)))
    x = add(x, y)
    out = reshape(permute(x, (0, 2, 1)), (BD, C, h, w))
    if adapters_enabled:
        out = tp_mamba_forward(out, blk.adapter, dims)
    return out


def encoder_forward(X: Tensor, enc: Encoder, adapters_enabled: bool = True) -> list[Tensor]:
    """Chain all blocks; return the feature taps of the last four blocks."""
    cfg = enc.cfg
    if cfg.n_blocks < 4:
        raise ConfigError(f"need at least 4 blocks for the output taps, got {cfg.n_blocks}")
    B, _, D, H, W = X.shape
    F = patch_embed_slices(X, enc)
    if F.shape[2:] != enc.pos.shape[2:]:
        raise ShapeError(
            f"feature grid {F.shape[2:]} does not match positional embedding "
            f"{enc.pos.shape[2:]} (configured img_hw={cfg.img_hw})"
        )
    F = add(F, enc.pos.value)
    taps = []
    for i, blk in enumerate(enc.blocks):
        F = vit_block_forward(F, blk, (B, D), adapters_enabled=adapters_enabled)
        if i >= cfg.n_blocks - 4:
            taps.append(F)
    return taps


def freeze_partition(params: list[Parameter]) -> tuple[list[Parameter], list[Parameter]]:
    """Split parameters into (trainable, frozen); the two sets partition all."""
    trainable = [p for p in params if p.trainable]
    frozen = [p for p in params if not p.trainable]
    assert len(trainable) + len(frozen) == len(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate parameter names break the partition")
    return trainable, frozen
