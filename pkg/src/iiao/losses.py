"""Euclidean loss, Regional Correlation Loss and the weighted training objective."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import ConfigError, ForwardOutputs
from .tensor import Tensor, ShapeError, combine, note_decision, pointwise, reduce, scale


@dataclass
class LossConfig:
    window_k: int = 27
    stride_s: int = 23
    threshold: float = 0.95
    lam: float = 1.5
    gamma: float = 0.5
    # "rc" or "mse": loss applied to the intermediate f_wei heads
    wei_loss: str = "rc"

    def problems(self) -> list[str]:
        p = []
        if not 1 <= self.stride_s <= self.window_k:
            p.append(f"loss.stride_s={self.stride_s} must satisfy 1 <= stride_s <= window_k={self.window_k}")
        if not 0 < self.threshold <= 1:
            p.append(f"loss.threshold={self.threshold} must lie in (0, 1]")
        if self.lam < 0 or self.gamma < 0:
            p.append(f"loss.lam={self.lam} and loss.gamma={self.gamma} must be non-negative")
        if self.wei_loss not in ("rc", "mse"):
            p.append(f"loss.wei_loss={self.wei_loss!r} must be 'rc' or 'mse'")
        return p

    def validate(self) -> LossConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class WindowGrid:
    offsets: tuple[tuple[int, int], ...]
    k: int

    def coverage(self, h: int, w: int) -> np.ndarray:
        """Number of windows covering each pixel."""
        cov = np.zeros((h, w), dtype=np.int64)
        for r, c in self.offsets:
            cov[r:r + self.k, c:c + self.k] += 1
        return cov


def _axis_offsets(n: int, k: int, s: int) -> list[int]:
    count = (n - k) // s + 1
    offs = [i * s for i in range(count)]
    if offs[-1] + k < n:
        offs.append(n - k)
    return offs


def window_grid(h: int, w: int, k: int, s: int) -> WindowGrid:
    """Sliding-window corners, with an edge-flush window when the stride grid under-covers."""
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    if k < 1 or k > min(h, w):
        raise ValueError(f"window {k} does not fit a {h}x{w} map")
    rows, cols = _axis_offsets(h, k, s), _axis_offsets(w, k, s)
    return WindowGrid(tuple((r, c) for r in rows for c in cols), k)


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 4 or a.shape[1] != 1:
        raise ShapeError(f"{what}: expected B x 1 x h x w maps, got {a.shape}")


def euclidean_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """(1/N) * sum over images of the squared L2 distance between maps."""
    _check_pair(pred, gt, "euclidean_loss")
    sq = pointwise(combine(pred, gt, "sub"), "square")
    return scale(reduce(sq, "sum_all"), 1.0 / pred.shape[0])


def error_map(f_wei: Tensor, gt: Tensor) -> Tensor:
    _check_pair(f_wei, gt, "error_map")
    return pointwise(combine(f_wei, gt, "sub"), "abs")


def branch_counts(err: np.ndarray, grid: WindowGrid, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel number of windows placing it in the error-prone / error-tolerant branch.

    ``err`` is a detached B x 1 x h x w error map. A pixel is error-prone in a
    window when it exceeds ``threshold`` times that window's maximum error.
    """
    n_ep = np.zeros(err.shape, dtype=err.dtype)
    n_et = np.zeros(err.shape, dtype=err.dtype)
    k = grid.k
    for r, c in grid.offsets:
        win = err[:, :, r:r + k, c:c + k]
        peak = win.max(axis=(2, 3), keepdims=True)
        ep = win > peak * threshold
        n_ep[:, :, r:r + k, c:c + k] += ep
        n_et[:, :, r:r + k, c:c + k] += ~ep
    return n_ep, n_et


def rc_loss(E: Tensor, cfg: LossConfig) -> Tensor:
    """Regional Correlation Loss over an error map.

    Window maxima and branch membership are taken on detached values; the
    gradient flows through ``(E*sigmoid(E) + E)**2`` on error-prone pixels and
    ``E**2`` elsewhere, once per covering window.
    """
    if E.ndim != 4 or E.shape[1] != 1:
        raise ShapeError(f"rc_loss expects B x 1 x h x w, got {E.shape}")
    B, _, h, w = E.shape
    grid = window_grid(h, w, cfg.window_k, cfg.stride_s)
    n_ep, n_et = branch_counts(E.data, grid, cfg.threshold)
    note_decision(n_ep)
    hard = pointwise(pointwise(E, "silu_plus_identity"), "square")
    soft = pointwise(E, "square")
    total = combine(combine(hard, Tensor(n_ep), "mul"), combine(soft, Tensor(n_et), "mul"), "add")
    return scale(reduce(total, "sum_all"), 1.0 / B)


def wei_loss(f_wei: Tensor, gt: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.wei_loss == "mse":
        return euclidean_loss(f_wei, gt)
    return rc_loss(error_map(f_wei, gt), cfg)


def loss_terms(outputs: ForwardOutputs, gt: Tensor, cfg: LossConfig) -> tuple[Tensor, list[Tensor], Tensor]:
    """Total objective plus its unweighted components ``(total, [wei_i], pre)``."""
    weis = [wei_loss(f, gt, cfg) for f in outputs.f_wei_list]
    pre = euclidean_loss(outputs.f_pre, gt)
    total = scale(pre, cfg.gamma)
    for term in weis:
        total = combine(total, scale(term, cfg.lam), "add")
    return total, weis, pre


def total_loss(outputs: ForwardOutputs, gt: Tensor, cfg: LossConfig) -> Tensor:
    """lam * sum_i L_wei_i + gamma * L_pre, one L_wei per IIAO head."""
    for f in outputs.f_wei_list:
        _check_pair(f, gt, "total_loss")
    _check_pair(outputs.f_pre, gt, "total_loss")
    return loss_terms(outputs, gt, cfg)[0]
