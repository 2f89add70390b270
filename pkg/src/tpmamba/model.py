"""Encoder + decoder assembled into one volumetric segmentation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, ViTConfig, encoder_forward, freeze_partition
from .seghead import Decoder, DecoderConfig, decoder_forward
from .tensor import Parameter, Tensor


@dataclass
class SegModel:
    encoder: Encoder
    decoder: Decoder

    @classmethod
    def init(cls, vit_cfg: ViTConfig, n_classes: int, seed: int, dtype=np.float32) -> "SegModel":
        rng = np.random.default_rng(seed)
        encoder = Encoder.init(vit_cfg, rng, dtype=dtype)
        dec_cfg = DecoderConfig(C=vit_cfg.C, K=n_classes, patch=vit_cfg.patch)
        decoder = Decoder.init(dec_cfg, rng, dtype=dtype)
        return cls(encoder=encoder, decoder=decoder)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def partition(self):
        return freeze_partition(self.parameters())

    def forward(self, X: Tensor, adapters_enabled: bool = True) -> Tensor:
        """(B,1,D,H,W) volume -> (B,K,D,H,W) logits."""
        B, _, D, H, W = X.shape
        taps = encoder_forward(X, self.encoder, adapters_enabled=adapters_enabled)
        return decoder_forward(taps, (B, D), self.decoder)

    def predict_logits(self, volume: np.ndarray) -> np.ndarray:
        """Inference entry point for sliding-window: numpy in, numpy out."""
        X = Tensor(np.ascontiguousarray(volume, dtype=self.encoder.patch_w.data.dtype))
        return self.forward(X).data
