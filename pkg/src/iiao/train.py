"""Augmentation, Adam and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .densitymap import AnnotationSet, render_adaptive, render_fixed, to_target_grid
from .losses import LossConfig, loss_terms
from .model import ConfigError, ModelConfig, Params, init_params, network_forward, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "loss_total", "loss_wei1", "loss_wei2", "loss_pre", "train_mae"]
LUMA = np.array([0.299, 0.587, 0.114])


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    crop: int = 400
    flip_p: float = 0.5
    gray_p: float = 0.1
    lr0: float = 1e-4
    halve_every: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 400
    clip_norm: float | None = None
    label_mode: str = "fixed"
    sigma: float = 4.0
    knn_k: int = 3
    knn_beta: float = 0.3
    sigma_min: float = 1.0
    sigma_max: float = 15.0
    seed: int = 0

    def problems(self) -> list[str]:
        p = []
        if self.crop <= 0 or self.crop % 16:
            p.append(f"train.crop={self.crop} must be a positive multiple of 16")
        for name in ("flip_p", "gray_p"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                p.append(f"train.{name}={v} must lie in [0, 1]")
        if not self.lr0 > 0:
            p.append(f"train.lr0={self.lr0} must be positive")
        if self.halve_every < 1:
            p.append(f"train.halve_every={self.halve_every} must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            p.append("train.batch_size must be >= 1 and train.epochs >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            p.append(f"train.clip_norm={self.clip_norm} must be positive when set")
        if self.label_mode not in ("fixed", "adaptive"):
            p.append(f"train.label_mode={self.label_mode!r} must be 'fixed' or 'adaptive'")
        if not self.sigma > 0:
            p.append(f"train.sigma={self.sigma} must be positive")
        return p

    def validate(self) -> TrainConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def render_target(ann: AnnotationSet, cfg: TrainConfig, factor: int = 8) -> np.ndarray:
    if cfg.label_mode == "adaptive":
        dm = render_adaptive(ann, cfg.knn_k, cfg.knn_beta, cfg.sigma_min, cfg.sigma_max)
    else:
        dm = render_fixed(ann, cfg.sigma)
    return to_target_grid(dm, factor).values


def augment(image: np.ndarray, ann: AnnotationSet, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, AnnotationSet, np.ndarray]:
    """Random crop, horizontal flip and grayscale; returns (patch, patch points, 1/8 target)."""
    crop = cfg.crop
    _, H, W = image.shape
    pad_h, pad_w = max(crop - H, 0), max(crop - W, 0)
    if pad_h or pad_w:
        # reflection needs pad < size; fall back to symmetric for very small images
        mode = "reflect" if pad_h < H and pad_w < W else "symmetric"
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)
        H, W = H + pad_h, W + pad_w
    y0 = int(rng.integers(0, H - crop + 1))
    x0 = int(rng.integers(0, W - crop + 1))
    flip = rng.random() < cfg.flip_p
    gray = rng.random() < cfg.gray_p

    patch = image[:, y0:y0 + crop, x0:x0 + crop]
    pts = ann.points - np.array([x0, y0], dtype=np.float64)
    keep = (pts[:, 0] >= 0) & (pts[:, 0] < crop) & (pts[:, 1] >= 0) & (pts[:, 1] < crop)
    pts = pts[keep]
    if flip:
        patch = patch[:, :, ::-1]
        # mirror about the crop centre; x in (crop-1, crop) lands just below 0
        pts = np.column_stack([np.maximum(crop - 1 - pts[:, 0], 0.0), pts[:, 1]])
    if gray:
        lum = np.tensordot(LUMA, patch, axes=1)
        patch = np.broadcast_to(lum, patch.shape)
    patch = np.ascontiguousarray(patch)
    sub = AnnotationSet(ann.image_id, crop, crop, pts)
    return patch, sub, render_target(sub, cfg)


# -- optimisation ------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place. Rejects the whole step on a non-finite gradient."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Params
    history: list[dict]
    best_mae: float
    best_epoch: int


def _format(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _batch_step(params, model_cfg, loss_cfg, images, targets):
    x = Tensor(np.stack(images).astype(model_cfg.dtype))
    gt = Tensor(np.stack(targets)[:, None].astype(model_cfg.dtype))
    out = network_forward(x, params, model_cfg)
    total, weis, pre = loss_terms(out, gt, loss_cfg)
    pred_counts = out.f_pre.data.sum(axis=(1, 2, 3))
    gt_counts = gt.data.sum(axis=(1, 2, 3))
    return total, weis, pre, np.abs(pred_counts - gt_counts)


def train_loop(model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
               dataset: list[tuple[np.ndarray, AnnotationSet]], out_dir=None,
               params: Params | None = None) -> TrainResult:
    """Train on ``dataset``; writes ``metrics.csv``, ``last.ckpt.json`` and ``best.ckpt.json`` to ``out_dir``.

    Shuffling and augmentation draw from independent streams spawned from
    ``train_cfg.seed``; parameter init uses ``model_cfg.seed``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    model_cfg.validate()
    train_cfg.validate()
    loss_cfg.validate()
    params = params if params is not None else init_params(model_cfg)
    shuffle_seq, aug_seq = np.random.SeedSequence(train_cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    state = AdamState(train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)

    out = Path(out_dir) if out_dir is not None else None
    columns = list(LOG_COLUMNS) + [f"loss_wei{i}" for i in range(3, model_cfg.iiao_stack + 1)]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(columns)
    history: list[dict] = []
    best_mae, best_epoch = math.inf, -1
    try:
        for epoch in range(train_cfg.epochs):
            lr = lr_at(epoch, train_cfg)
            order = shuffle_rng.permutation(len(dataset))
            sums = {"total": 0.0, "pre": 0.0}
            wei_sums = [0.0] * model_cfg.iiao_stack
            abs_err, n_seen, n_batches = 0.0, 0, 0
            for start in range(0, len(order), train_cfg.batch_size):
                images, targets = [], []
                for idx in order[start:start + train_cfg.batch_size]:
                    img, ann = dataset[idx]
                    patch, _, target = augment(img, ann, train_cfg, aug_rng)
                    images.append(patch)
                    targets.append(target)
                total, weis, pre, errs = _batch_step(params, model_cfg, loss_cfg, images, targets)
                value = total.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}; last good checkpoint kept")
                for p in params.values():
                    p.grad = None
                total.backward()
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                if train_cfg.clip_norm is not None:
                    clip_grads(grads, train_cfg.clip_norm)
                adam_step(params, grads, state, lr)
                sums["total"] += value
                sums["pre"] += pre.item()
                for i, w in enumerate(weis):
                    wei_sums[i] += w.item()
                abs_err += float(errs.sum())
                n_seen += len(errs)
                n_batches += 1

            row = {
                "epoch": epoch,
                "lr": lr,
                "loss_total": sums["total"] / n_batches,
                "loss_pre": sums["pre"] / n_batches,
                "train_mae": abs_err / n_seen,
            }
            for i in range(max(2, model_cfg.iiao_stack)):
                row[f"loss_wei{i + 1}"] = wei_sums[i] / n_batches if i < model_cfg.iiao_stack else None
            history.append(row)
            log.info("epoch %d lr %.3g loss %.6g train_mae %.4f", epoch, lr, row["loss_total"], row["train_mae"])
            if out is not None:
                writer.writerow([_format(row.get(c)) for c in columns])
                log_fh.flush()
                meta = {"epoch": epoch, "train_mae": row["train_mae"]}
                save_checkpoint(out / "last.ckpt.json", params, model_cfg, meta)
                if row["train_mae"] < best_mae:
                    save_checkpoint(out / "best.ckpt.json", params, model_cfg, meta)
            if row["train_mae"] < best_mae:
                best_mae, best_epoch = row["train_mae"], epoch
    finally:
        if out is not None:
            log_fh.close()
    return TrainResult(params, history, best_mae, best_epoch)
