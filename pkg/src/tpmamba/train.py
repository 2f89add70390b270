"""Training loop, evaluation and single-volume inference."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_into_model, save_checkpoint
from .config import TrainConfig, from_flat_dict, to_flat_dict
from .data import (
    AugmentConfig,
    VolumeRecord,
    augment,
    list_dataset,
    load_record,
    preprocess,
    write_rvol,
)
from .errors import InputError
from .model import SegModel
from .optim import AdamWState, adamw_step, lr_schedule
from .seghead import dice_ce_loss, dice_score, sliding_window_infer
from .tensor import Tensor, recording


def build_model(cfg: TrainConfig, dtype=np.float32) -> SegModel:
    return SegModel.init(cfg.vit_config(), cfg.n_classes, seed=cfg.seed, dtype=dtype)


def model_from_checkpoint(path) -> tuple[SegModel, TrainConfig]:
    from .checkpoint import load_checkpoint

    _, flat, seed = load_checkpoint(path)
    cfg = from_flat_dict(flat)
    model = build_model(cfg)
    load_into_model(model, path)
    return model, cfg


def _train_record_step(model, rec, cfg, rng, trainable, opt_state, lr):
    aug_cfg = AugmentConfig(
        crop=tuple(cfg.crop),
        flip=cfg.flip,
        contrast=cfg.contrast,
        scale_jitter=cfg.scale_jitter,
    )
    sample = augment(rec, rng, aug_cfg)
    if sample.labels is None:
        raise InputError("training requires labelled volumes")
    x = Tensor(sample.voxels[None, None].astype(np.float32))
    with recording() as tape:
        logits = model.forward(x)
        loss = dice_ce_loss(logits, sample.labels[None].astype(np.int64))
    tape.backward(loss)
    adamw_step(trainable, opt_state, lr, weight_decay=cfg.weight_decay)
    pred = logits.data.argmax(axis=1)
    _, mean_dice = dice_score(pred, sample.labels[None], cfg.n_classes)
    return float(loss.data), mean_dice


def train(
    cfg: TrainConfig,
    data_dir,
    out_ckpt,
    metrics_csv=None,
    epochs: Optional[int] = None,
    log: Optional[Callable[[str], None]] = None,
) -> list[dict]:
    """Train on every labelled record per epoch; returns the metrics rows.

    Fully reproducible: the model init derives from cfg.seed and each
    (epoch, record) pair gets its own pre-assigned RNG stream.
    """
    n_epochs = epochs if epochs is not None else cfg.epochs
    pairs = list_dataset(data_dir)
    records = []
    for vol, lab in pairs:
        if lab is None:
            raise InputError(f"{vol}: training requires a label file")
        records.append(preprocess(load_record(vol, lab)))

    model = build_model(cfg)
    trainable, _ = model.partition()
    opt_state = AdamWState(trainable)

    rows = []
    for epoch in range(n_epochs):
        lr = lr_schedule(epoch, n_epochs, cfg.lr_start, cfg.lr_end)
        losses, dices = [], []
        for idx, rec in enumerate(records):
            rng = np.random.default_rng((cfg.seed, epoch, idx))
            loss, mean_dice = _train_record_step(
                model, rec, cfg, rng, trainable, opt_state, lr
            )
            losses.append(loss)
            dices.append(mean_dice)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.mean(losses)),
            "mean_dice": float(np.mean(dices)),
        }
        rows.append(row)
        if log is not None:
            log(
                f"epoch {epoch + 1}/{n_epochs}  lr {lr:.3e}  loss {row['loss']:.4f}  "
                f"dice {row['mean_dice']:.4f}"
            )

    named = {name: p.data for name, p in model.named_parameters().items()}
    save_checkpoint(out_ckpt, named, to_flat_dict(cfg), cfg.seed)
    if metrics_csv is not None:
        write_metrics_csv(metrics_csv, rows)
    return rows


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "loss", "mean_dice"])
        for row in rows:
            writer.writerow(
                [row["epoch"], f"{row['lr']:.10g}", f"{row['loss']:.10g}", f"{row['mean_dice']:.10g}"]
            )


def evaluate_model(
    model_fn: Callable[[np.ndarray], np.ndarray],
    records: list[tuple[str, VolumeRecord]],
    K: int,
    window: tuple = (96, 96, 96),
) -> list[dict]:
    """Sliding-window Dice per volume plus a trailing mean row."""
    rows = []
    per_class = []
    for name, rec in records:
        if rec.labels is None:
            raise InputError(f"{name}: evaluation requires labels")
        result = sliding_window_infer(
            rec.voxels[None, None].astype(np.float32), model_fn, window=window
        )
        scores, mean = dice_score(result.labels, rec.labels[None], K)
        per_class.append(scores)
        rows.append({"volume": name, "scores": scores, "mean": mean})
    stacked = np.stack(per_class)
    rows.append(
        {
            "volume": "mean",
            "scores": stacked.mean(axis=0),
            "mean": float(stacked.mean(axis=0).mean()),
        }
    )
    return rows


def write_eval_csv(path, rows: list[dict], K: int) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["volume"] + [f"class{k}" for k in range(1, K)] + ["mean"])
        for row in rows:
            writer.writerow(
                [row["volume"]]
                + [f"{s:.6f}" for s in row["scores"]]
                + [f"{row['mean']:.6f}"]
            )


def evaluate(ckpt_path, data_dir, out_csv, window: Optional[tuple] = None) -> list[dict]:
    model, cfg = model_from_checkpoint(ckpt_path)
    win = window if window is not None else tuple(cfg.crop)
    records = []
    for vol, lab in list_dataset(data_dir):
        if lab is None:
            raise InputError(f"{vol}: evaluation requires a label file")
        records.append((Path(vol).name, preprocess(load_record(vol, lab))))
    rows = evaluate_model(model.predict_logits, records, cfg.n_classes, window=win)
    write_eval_csv(out_csv, rows, cfg.n_classes)
    return rows


def infer_volume(ckpt_path, volume_path, out_path, window: Optional[tuple] = None) -> np.ndarray:
    """Segment one volume and write the labels as a u8 RVOL file."""
    model, cfg = model_from_checkpoint(ckpt_path)
    win = window if window is not None else tuple(cfg.crop)
    rec = preprocess(load_record(volume_path))
    result = sliding_window_infer(
        rec.voxels[None, None].astype(np.float32), model.predict_logits, window=win
    )
    labels = result.labels[0].astype(np.uint8)
    write_rvol(out_path, labels, rec.spacing)
    return labels
