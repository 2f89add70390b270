"""Volume records, raw file I/O, preprocessing, augmentation, synthetic data.

Volumes travel as `VolumeRecord`s: raw CT-like intensities on a (D,H,W) grid
with per-axis mm spacing and optional integer labels.  On disk they use the
RVOL format: magic "RVOL", three u32 extents (D,H,W), three f32 spacings, a
u8 dtype code (0 = f32 voxels, 1 = u8 labels) and the raw little-endian
payload.  Clinical formats are deliberately out of scope; converting them to
RVOL is the documented extension point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError

RVOL_MAGIC = b"RVOL"
HU_LO, HU_HI = -200.0, 250.0

VOLUME_SUFFIX = ".img.rvol"
LABEL_SUFFIX = ".lbl.rvol"


@dataclass
class VolumeRecord:
    voxels: np.ndarray  # (D,H,W) float32
    spacing: tuple  # (sd,sh,sw) mm per voxel
    labels: Optional[np.ndarray] = None  # (D,H,W) integer class ids

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise InputError(f"voxels must be 3-D, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise InputError(f"spacing components must be positive, got {self.spacing}")
        if self.labels is not None and self.labels.shape != self.voxels.shape:
            raise InputError(
                f"labels grid {self.labels.shape} differs from voxels {self.voxels.shape}"
            )


# ---------------------------------------------------------------------------
# RVOL I/O


def write_rvol(path, array: np.ndarray, spacing: tuple) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.uint8:
        code = 1
    else:
        raise InputError(f"RVOL stores f32 or u8 arrays, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(RVOL_MAGIC)
        f.write(struct.pack("<3I", *arr.shape))
        f.write(struct.pack("<3f", *spacing))
        f.write(struct.pack("<B", code))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_rvol(path) -> tuple[np.ndarray, tuple]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RVOL_MAGIC:
        raise InputError(f"{path}: not an RVOL file")
    d, h, w = struct.unpack_from("<3I", blob, 4)
    spacing = struct.unpack_from("<3f", blob, 16)
    (code,) = struct.unpack_from("<B", blob, 28)
    dtype = {0: np.dtype("<f4"), 1: np.dtype("u1")}.get(code)
    if dtype is None:
        raise InputError(f"{path}: unknown dtype code {code}")
    expected = 29 + d * h * w * dtype.itemsize
    if len(blob) != expected:
        raise InputError(f"{path}: truncated payload ({len(blob)} bytes, expected {expected})")
    arr = np.frombuffer(blob, dtype=dtype, offset=29).reshape(d, h, w)
    return arr.astype(dtype.newbyteorder("=")), spacing


def load_record(volume_path, label_path=None) -> VolumeRecord:
    voxels, spacing = read_rvol(volume_path)
    labels = None
    if label_path is not None:
        labels, lsp = read_rvol(label_path)
        if labels.shape != voxels.shape:
            raise InputError(
                f"label grid {labels.shape} does not match volume {voxels.shape}"
            )
    return VolumeRecord(voxels=voxels.astype(np.float32), spacing=spacing, labels=labels)


def list_dataset(data_dir) -> list[tuple[Path, Optional[Path]]]:
    """Sorted (volume, label) RVOL pairs in a directory; labels optional."""
    root = Path(data_dir)
    vols = sorted(root.glob(f"*{VOLUME_SUFFIX}"))
    if not vols:
        raise InputError(f"no *{VOLUME_SUFFIX} volumes found in {root}")
    pairs = []
    for v in vols:
        lab = Path(str(v)[: -len(VOLUME_SUFFIX)] + LABEL_SUFFIX)
        pairs.append((v, lab if lab.exists() else None))
    return pairs


# ---------------------------------------------------------------------------
# resampling (raw numpy; inference-side code, no gradients involved)


def _linear_resample_axis(vol: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = vol.shape[axis]
    if n_out == n_in:
        return vol
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(vol.dtype)
    moved = np.moveaxis(vol, axis, 0)
    out = moved[lo] * (1 - frac).reshape(-1, *([1] * (vol.ndim - 1))) + moved[hi] * frac.reshape(
        -1, *([1] * (vol.ndim - 1))
    )
    return np.moveaxis(out, 0, axis)


def _nearest_resample_axis(vol: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = vol.shape[axis]
    if n_out == n_in:
        return vol
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    idx = np.clip(np.round(src).astype(int), 0, n_in - 1)
    return np.take(vol, idx, axis=axis)


def resample(vol: np.ndarray, factors: tuple, order: str) -> np.ndarray:
    """Separable rescale by per-axis factors; 'linear' or 'nearest'."""
    out = vol
    for axis, f in enumerate(factors):
        n_out = max(int(round(out.shape[axis] * f)), 1)
        if order == "linear":
            out = _linear_resample_axis(out, axis, n_out)
        else:
            out = _nearest_resample_axis(out, axis, n_out)
    return out


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(rec: VolumeRecord) -> VolumeRecord:
    """Window to [-200, 250] HU, map onto [0,1] with fixed bounds, resample
    to 1.0 mm isotropic spacing (nearest-neighbour for labels).

    Idempotent on already-processed records: data entirely within [0,1] is
    treated as windowed (raw HU volumes always exceed that range) and a
    spacing of exactly 1.0 mm skips resampling bit-exactly.
    """
    vox = rec.voxels.astype(np.float32)
    if vox.min() < 0.0 or vox.max() > 1.0:
        vox = np.clip(vox, HU_LO, HU_HI)
        vox = (vox - HU_LO) / (HU_HI - HU_LO)
    labels = rec.labels
    if tuple(rec.spacing) != (1.0, 1.0, 1.0):
        vox = resample(vox, rec.spacing, "linear")
        if labels is not None:
            labels = resample(labels, rec.spacing, "nearest")
    return VolumeRecord(voxels=vox.astype(np.float32), spacing=(1.0, 1.0, 1.0), labels=labels)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop: tuple = (96, 96, 96)
    flip: bool = True
    contrast: bool = True
    scale_jitter: bool = True
    contrast_range: tuple = (0.7, 1.3)
    scale_range: tuple = (0.9, 1.1)


def _crop_or_pad(arr: np.ndarray, target: tuple, starts: Optional[tuple], pad_value) -> np.ndarray:
    out = arr
    pads = []
    for ax, t in enumerate(target):
        short = max(t - out.shape[ax], 0)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        out = np.pad(out, pads, mode="constant", constant_values=pad_value)
    slices = []
    for ax, t in enumerate(target):
        extra = out.shape[ax] - t
        s = starts[ax] if starts is not None else extra // 2
        slices.append(slice(s, s + t))
    return out[tuple(slices)]


def augment(rec: VolumeRecord, rng: np.random.Generator, cfg: AugmentConfig) -> VolumeRecord:
    """Scale jitter, random crop (pad 0 when short), flips, contrast."""
    vox, labels = rec.voxels, rec.labels
    if cfg.scale_jitter:
        f = float(rng.uniform(*cfg.scale_range))
        vox = resample(vox, (f, f, f), "linear")
        if labels is not None:
            labels = resample(labels, (f, f, f), "nearest")
    starts = tuple(
        int(rng.integers(0, max(vox.shape[ax] - cfg.crop[ax], 0) + 1)) for ax in range(3)
    )
    vox = _crop_or_pad(vox, cfg.crop, starts, 0.0)
    if labels is not None:
        labels = _crop_or_pad(labels, cfg.crop, starts, 0)
    if cfg.flip:
        for ax in range(3):
            if rng.random() < 0.5:
                vox = np.flip(vox, axis=ax)
                if labels is not None:
                    labels = np.flip(labels, axis=ax)
    if cfg.contrast:
        gamma = float(rng.uniform(*cfg.contrast_range))
        mean = float(vox.mean())
        vox = np.clip(mean + gamma * (vox - mean), 0.0, 1.0)
    return VolumeRecord(
        voxels=np.ascontiguousarray(vox, dtype=np.float32),
        spacing=rec.spacing,
        labels=np.ascontiguousarray(labels) if labels is not None else None,
    )


# ---------------------------------------------------------------------------
# synthetic data


def _smooth_noise(rng: np.random.Generator, shape: tuple, sigma_vox: int = 4) -> np.ndarray:
    """Cheap smooth field: box-filter white noise a few times per axis."""
    field = rng.standard_normal(shape).astype(np.float32)
    k = 2 * sigma_vox + 1
    for _ in range(2):
        for ax in range(3):
            c = np.cumsum(np.pad(field, [(k, k) if a == ax else (0, 0) for a in range(3)], mode="edge"), axis=ax)
            lo = np.take(c, np.arange(shape[ax]) + k, axis=ax)
            hi = np.take(c, np.arange(shape[ax]) + 2 * k, axis=ax)
            field = (hi - lo) / k
    field -= field.mean()
    denom = max(float(np.abs(field).max()), 1e-6)
    return field / denom


def make_synthetic_record(
    size: tuple, K: int, rng: np.random.Generator, min_frac: float = 0.01
) -> VolumeRecord:
    """One volume with K-1 ellipsoidal structures in distinct intensity bands.

    Intensities span a HU-like range [-200, 300] so the preprocessing window
    clips the brightest class.  Each foreground class is guaranteed at least
    `min_frac` of the voxels (centres and radii are re-drawn until it holds).
    """
    D, H, W = size
    zz, yy, xx = np.meshgrid(
        np.arange(D, dtype=np.float32),
        np.arange(H, dtype=np.float32),
        np.arange(W, dtype=np.float32),
        indexing="ij",
    )
    vox = (-120.0 + 50.0 * _smooth_noise(rng, size)).astype(np.float32)
    labels = np.zeros(size, dtype=np.uint8)
    # brightest class pinned at 290 HU so the [-200, 250] window always clips
    levels = np.linspace(290.0, 40.0, K - 1)[::-1]
    for k in range(1, K):
        for _ in range(64):
            center = [rng.uniform(0.3 * n, 0.7 * n) for n in size]
            radii = [rng.uniform(0.16 * n, 0.30 * n) for n in size]
            mask = (
                ((zz - center[0]) / radii[0]) ** 2
                + ((yy - center[1]) / radii[1]) ** 2
                + ((xx - center[2]) / radii[2]) ** 2
            ) <= 1.0
            mask &= labels == 0
            if mask.sum() >= min_frac * labels.size:
                break
        labels[mask] = k
        vox[mask] = levels[k - 1] + 15.0 * _smooth_noise(rng, size)[mask]
    vox += rng.normal(0.0, 8.0, size).astype(np.float32)
    vox = np.clip(vox, -200.0, 300.0).astype(np.float32)
    return VolumeRecord(voxels=vox, spacing=(1.0, 1.0, 1.0), labels=labels)


def gen_synth(n: int, size: tuple, K: int, seed: int, out_dir) -> list[str]:
    """Write n deterministic synthetic volume/label RVOL pairs."""
    if min(size) < 32:
        raise InputError(f"synthetic volumes need extents >= 32, got {size}")
    if K < 2:
        raise InputError(f"need at least 2 classes, got K={K}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        rec = make_synthetic_record(size, K, rng)
        stem = f"case{i:03d}"
        write_rvol(out / f"{stem}{VOLUME_SUFFIX}", rec.voxels, rec.spacing)
        write_rvol(out / f"{stem}{LABEL_SUFFIX}", rec.labels.astype(np.uint8), rec.spacing)
        names.append(stem)
    return names
