"""Whole-image inference, MAE/MSE, density-level breakdowns and exports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .densitymap import AnnotationSet, DensityMap, save_csv, save_pgm
from .model import ModelConfig, Params, network_forward
from .tensor import Tensor

LARGE_SIDE = 5000
LARGE_SCALE = 0.8


@dataclass
class EvalReport:
    per_image: list[tuple[str, float, float]]
    mae: float
    mse: float
    level_breakdown: dict[str, dict] | None = field(default=None)

    def to_json(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "per_image": [{"image_id": i, "gt": g, "pred": p} for i, g, p in self.per_image],
            "levels": self.level_breakdown or {},
        }


def _pad_amounts(n: int, multiple: int = 16) -> tuple[int, int]:
    total = -n % multiple
    return total // 2, total - total // 2


def predict_count(image: np.ndarray, params: Params, config: ModelConfig,
                  rescale_large: bool = False) -> tuple[float, DensityMap]:
    """Count = sum of the 1/8-resolution prediction map.

    Sides not divisible by 16 are reflection-padded symmetrically; the map is
    cropped back to the cells overlapping the original image.
    """
    img = np.asarray(image, dtype=np.float64)
    if rescale_large and max(img.shape[1:]) > LARGE_SIDE:
        img = ndimage.zoom(img, (1, LARGE_SCALE, LARGE_SCALE), order=1)
    _, H, W = img.shape
    (t, b), (l, r) = _pad_amounts(H), _pad_amounts(W)
    if t or b or l or r:
        mode = "reflect" if max(t, b) < H and max(l, r) < W else "symmetric"
        img = np.pad(img, ((0, 0), (t, b), (l, r)), mode=mode)
    out = network_forward(Tensor(img[None].astype(config.dtype)), params, config)
    pred = out.f_pre.data[0, 0].astype(np.float64)
    pred = pred[t // 8: math.ceil((t + H) / 8), l // 8: math.ceil((l + W) / 8)]
    return float(pred.sum()), DensityMap(pred)


def mae_mse(rows) -> tuple[float, float]:
    """MAE and root-mean-square error over ``(gt, pred)`` pairs or ``(id, gt, pred)`` rows."""
    rows = list(rows)
    if not rows:
        raise ValueError("mae_mse needs at least one row")
    gt = np.array([r[-2] for r in rows], dtype=np.float64)
    pred = np.array([r[-1] for r in rows], dtype=np.float64)
    res = np.abs(pred - gt)
    peak = res.max()
    if peak == 0:
        return 0.0, 0.0
    # scale by the peak so squaring neither underflows nor overflows
    return float(res.mean()), float(peak * np.sqrt(((res / peak) ** 2).mean()))


def level_labels(bounds) -> list[str]:
    edges = [0] + list(bounds)
    labels = [f"[0,{edges[1]:g}]"] + [f"({a:g},{b:g}]" for a, b in zip(edges[1:-1], edges[2:])]
    return labels + [f">{edges[-1]:g}"]


def level_breakdown(rows, bounds=(50, 500)) -> dict[str, dict]:
    """Bucket rows by ground-truth count (closed upper bounds); empty buckets are omitted."""
    bounds = list(bounds)
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ValueError(f"bounds must be strictly increasing, got {bounds}")
    labels = level_labels(bounds)
    buckets: dict[str, list] = {lab: [] for lab in labels}
    for row in rows:
        idx = int(np.searchsorted(bounds, row[-2], side="left"))
        buckets[labels[idx]].append(row)
    out = {}
    for lab in labels:
        if buckets[lab]:
            mae, mse = mae_mse(buckets[lab])
            out[lab] = {"mae": mae, "mse": mse, "n": len(buckets[lab])}
    return out


def evaluate(dataset: list[tuple[np.ndarray, AnnotationSet]], params: Params, config: ModelConfig,
             bounds=(50, 500), rescale_large: bool = False) -> EvalReport:
    rows = []
    for img, ann in dataset:
        count, _ = predict_count(img, params, config, rescale_large)
        rows.append((ann.image_id, float(ann.count), count))
    mae, mse = mae_mse(rows)
    return EvalReport(rows, mae, mse, level_breakdown(rows, bounds) if bounds else None)


def export(obj, path, format: str = "csv") -> Path:
    """Write a DensityMap (``csv``/``pgm``) or an EvalReport (``scatter_csv``/``json``).

    ``scatter_csv`` has no header: one ``gt,pred`` line per image.
    """
    path = Path(path)
    try:
        if format in ("csv", "pgm"):
            values = obj.values if isinstance(obj, DensityMap) else np.asarray(obj)
            if format == "csv":
                save_csv(values, path)
            else:
                save_pgm(values, path)
        elif format == "scatter_csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for _, g, p in obj.per_image:
                    w.writerow([repr(float(g)), repr(float(p))])
        elif format == "json":
            path.write_text(json.dumps(obj.to_json(), indent=2))
        else:
            raise ValueError(f"unknown export format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path
