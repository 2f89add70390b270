"""Training configuration and the flat key=value config-file format.

The file namespace merges the training fields and the encoder fields at the
top level; adapter fields live under the `adapter.` prefix (for example
`adapter.scan_mode=tri_plane`).  Unknown keys are errors.  The same flat
dict is snapshotted into checkpoints so a saved model can be rebuilt without
the original file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .encoder import ViTConfig
from .errors import ConfigError
from .triplane import TPMambaConfig


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr_start: float = 2e-4
    lr_end: float = 0.0
    weight_decay: float = 1e-2
    batch_size: int = 1
    crop: tuple = (96, 96, 96)
    seed: int = 0
    n_classes: int = 2
    flip: bool = True
    contrast: bool = True
    scale_jitter: bool = True
    # encoder
    C: int = 96
    patch: int = 16
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    lora_rank: int = 4
    lora_alpha: float = 4.0
    n_outputs: int = 4
    # adapter (prefix `adapter.` in config files)
    adapter_r: int = 24
    adapter_dilations: tuple = (1, 2, 4, 8)
    adapter_depth_kernel: int = 3
    adapter_scan_mode: str = "tri_plane"
    adapter_conv_mode: str = "multiscale"
    adapter_d_state: int = 16
    adapter_expand: int = 2
    adapter_d_conv: int = 4
    adapter_dt_rank: Optional[int] = None

    def __post_init__(self):
        if self.lr_start <= self.lr_end or self.lr_end < 0:
            raise ConfigError(
                f"need lr_start > lr_end >= 0, got {self.lr_start} and {self.lr_end}"
            )
        if len(self.crop) != 3:
            raise ConfigError(f"crop must have 3 extents, got {self.crop}")
        for ext in self.crop[1:]:
            if ext % self.patch != 0:
                raise ConfigError(f"crop H/W {self.crop} must be divisible by patch {self.patch}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")

    def vit_config(self) -> ViTConfig:
        adapter = TPMambaConfig(
            C=self.C,
            r=self.adapter_r,
            dilations=self.adapter_dilations,
            depth_kernel=self.adapter_depth_kernel,
            scan_mode=self.adapter_scan_mode,
            conv_mode=self.adapter_conv_mode,
            d_state=self.adapter_d_state,
            expand=self.adapter_expand,
            d_conv=self.adapter_d_conv,
            dt_rank=self.adapter_dt_rank,
        )
        return ViTConfig(
            C=self.C,
            patch=self.patch,
            n_blocks=self.n_blocks,
            n_heads=self.n_heads,
            mlp_ratio=self.mlp_ratio,
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            adapter=adapter,
            n_outputs=self.n_outputs,
            img_hw=(self.crop[1], self.crop[2]),
        )


def _key_of(field_name: str) -> str:
    if field_name.startswith("adapter_"):
        return "adapter." + field_name[len("adapter_") :]
    return field_name


_FIELDS = {_key_of(f.name): f for f in fields(TrainConfig)}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key == "adapter.dt_rank":
        return None if raw.lower() in ("none", "auto") else int(raw)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(t) for t in raw.split(",") if t.strip())
    return raw


def to_flat_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = list(val)
        out[_key_of(f.name)] = val
    return out


def from_flat_dict(flat: dict) -> TrainConfig:
    kwargs = {}
    for key, val in flat.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(val, list):
            val = tuple(val)
        kwargs[_FIELDS[key].name] = val
    return TrainConfig(**kwargs)


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """key=value lines; '#' starts a comment; later keys win."""
    defaults = base if base is not None else TrainConfig()
    flat = to_flat_dict(defaults)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        current = flat[key]
        ref = tuple(current) if isinstance(current, list) else current
        parsed = _parse_value(key, raw, ref)
        flat[key] = list(parsed) if isinstance(parsed, tuple) else parsed
    return from_flat_dict(flat)


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read(), base=base)


def write_config(path, cfg: TrainConfig) -> None:
    flat = to_flat_dict(cfg)
    lines = []
    for key, val in flat.items():
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        elif val is None:
            val = "none"
        lines.append(f"{key}={val}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
