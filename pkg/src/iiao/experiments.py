"""Desk-scale experiments on synthetic scenes."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .evaluate import evaluate
from .losses import LossConfig
from .model import ModelConfig
from .synthdata import SceneSpec, generate
from .train import TrainConfig, train_loop

OVERFIT_COUNTS = (12, 25, 40, 18, 55)


def tiny_model(seed: int = 0) -> ModelConfig:
    return ModelConfig(base_channels=16, reduction_ratio=16, iiao_stack=2, encoder_widths=(8, 16, 16, 16), seed=seed)


def tiny_loss(**kw) -> LossConfig:
    # 16x16 maps from 128x128 crops: windows at 0 and 7 cover the map with 2 px of overlap
    return LossConfig(window_k=9, stride_s=7, threshold=0.95, lam=1.5, gamma=0.5, **kw)


def synthetic_scenes(counts, size: int = 128, seed0: int = 0, **spec_kw):
    return [generate(SceneSpec(size, size, n_points=n, seed=seed0 + i, **spec_kw), f"scene_{seed0 + i:04d}")
            for i, n in enumerate(counts)]


@dataclass
class OverfitResult:
    train_mae: float
    history: list[dict]
    seconds: float
    params: dict


def overfit_sanity(epochs: int = 200, seed: int = 0) -> OverfitResult:
    """Memorise 5 fixed 128x128 scenes; no flip/gray so the targets never change."""
    data = synthetic_scenes(OVERFIT_COUNTS)
    tcfg = TrainConfig(crop=128, flip_p=0.0, gray_p=0.0, lr0=3e-3, halve_every=50, batch_size=1,
                       epochs=epochs, seed=seed)
    mcfg = tiny_model(seed)
    t0 = time.perf_counter()
    res = train_loop(mcfg, tcfg, tiny_loss(), data)
    report = evaluate(data, res.params, mcfg, bounds=None)
    return OverfitResult(report.mae, res.history, time.perf_counter() - t0, res.params)


@dataclass
class AblationRow:
    name: str
    test_mae: float
    test_mse: float
    train_seconds: float


def rc_vs_mse(n_train: int = 15, n_test: int = 5, epochs: int = 60, seed: int = 0,
              count_range=(10, 100), size: int = 128) -> list[AblationRow]:
    """Same split, seeds and schedule; only the loss on the f_wei heads differs."""
    rng = np.random.default_rng(seed)
    counts = [int(c) for c in rng.integers(count_range[0], count_range[1] + 1, n_train + n_test)]
    scenes = synthetic_scenes(counts, size=size, seed0=1000 + seed)
    train, test = scenes[:n_train], scenes[n_train:]
    tcfg = TrainConfig(crop=size, flip_p=0.5, gray_p=0.1, lr0=1e-3, halve_every=max(epochs // 2, 1),
                       batch_size=1, epochs=epochs, seed=seed)
    rows = []
    for name, lcfg in [("RCLoss (threshold 0.95)", tiny_loss()), ("MSELoss", tiny_loss(wei_loss="mse"))]:
        mcfg = tiny_model(seed)
        t0 = time.perf_counter()
        res = train_loop(mcfg, replace(tcfg), lcfg, train)
        rep = evaluate(test, res.params, mcfg, bounds=None)
        rows.append(AblationRow(name, rep.mae, rep.mse, time.perf_counter() - t0))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    lines = ["| f_wei loss | test MAE | test MSE | train s |", "|---|---|---|---|"]
    lines += [f"| {r.name} | {r.test_mae:.3f} | {r.test_mse:.3f} | {r.train_seconds:.0f} |" for r in rows]
    return "\n".join(lines)
