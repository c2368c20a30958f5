"""Self-checks: finite-difference gradients and scalar-loop oracles.

Each suite returns a list of :class:`Check`; ``verify --suite ...`` on the
command line runs them and exits non-zero on the first failure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, model
from .densitymap import AnnotationSet, render_adaptive, render_fixed, to_target_grid
from .evaluate import mae_mse
from .tensor import Tensor, channel_softmax, combine, conv2d, grad_check, grad_check_detail, pointwise, reduce, resample

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.tol)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


# -- oracles ---------------------------------------------------------------------------

def _sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def rc_loss_oracle(E: np.ndarray, k: int, s: int, threshold: float) -> float:
    """Scalar loop over windows and pixels; windows enumerated independently of ``window_grid``."""
    B, _, h, w = E.shape

    def starts(n):
        out = list(range(0, n - k + 1, s))
        if out[-1] + k < n:
            out.append(n - k)
        return out

    total = 0.0
    for b in range(B):
        for r in starts(h):
            for c in starts(w):
                peak = max(E[b, 0, i, j] for i in range(r, r + k) for j in range(c, c + k))
                for i in range(r, r + k):
                    for j in range(c, c + k):
                        e = float(E[b, 0, i, j])
                        if e > peak * threshold:
                            total += (e * _sig(e) + e) ** 2
                        else:
                            total += e * e
    return total / B


def f_wei_oracle(f_att: np.ndarray, f_mul: np.ndarray) -> np.ndarray:
    """Per-pixel softmax-weighted dot product with math.fsum."""
    B, C, h, w = f_att.shape
    out = np.zeros((B, 1, h, w))
    for b in range(B):
        for i in range(h):
            for j in range(w):
                logits = [float(f_att[b, c, i, j]) for c in range(C)]
                m = max(logits)
                ex = [math.exp(v - m) for v in logits]
                z = math.fsum(ex)
                out[b, 0, i, j] = math.fsum(ex[c] / z * float(f_mul[b, c, i, j]) for c in range(C))
    return out


def coverage_counts(h: int, w: int, grid: losses.WindowGrid) -> np.ndarray:
    diff = np.zeros((h + 1, w + 1), dtype=np.int64)
    offs = np.array(grid.offsets).reshape(-1, 2)
    r, c, k = offs[:, 0], offs[:, 1], grid.k
    np.add.at(diff, (r, c), 1)
    np.add.at(diff, (r + k, c), -1)
    np.add.at(diff, (r, c + k), -1)
    np.add.at(diff, (r + k, c + k), 1)
    return diff.cumsum(0).cumsum(1)[:h, :w]


# -- gradient suite --------------------------------------------------------------------

def generic_params(cfg: model.ModelConfig, seed: int = 1, std: float = 0.2) -> model.Params:
    """Parameters away from ReLU kinks: larger kernels and random biases.

    The trained-from-scratch init (std 0.01, zero bias) puts nearly every
    pre-activation within finite-difference step of zero.
    """
    rng = np.random.default_rng(seed)
    params = model.init_params(model.ModelConfig(**{**cfg.to_dict(), "init_std": std, "seed": seed}))
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data[...] = 0.1 * rng.standard_normal(t.shape)
    return params


def tiny_config() -> model.ModelConfig:
    return model.ModelConfig(base_channels=16, reduction_ratio=16, iiao_stack=2, encoder_widths=(4, 8, 8, 8))


def _sum_sq(t: Tensor) -> Tensor:
    return reduce(pointwise(t, "square"), "sum_all")


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    rng = np.random.default_rng(seed)
    # |x| in [0.2, 2]: away from the kinks of abs/relu, and no vanishing
    # gradients whose central differences drown in roundoff
    T = lambda *shape: Tensor(rng.choice([-1, 1], shape) * rng.uniform(0.2, 2.0, shape))
    x, k, b = T(1, 3, 8, 8), T(4, 3, 3, 3), T(4)
    k1, b1 = T(4, 3, 1, 1), T(4)
    m = T(1, 4, 5, 5)
    p = Tensor(rng.permutation(100).reshape(1, 1, 10, 10) * 0.1 + rng.uniform(0, 0.01, (1, 1, 10, 10)))
    up, sp = T(1, 2, 5, 5), T(1, 2, 4, 6)
    a, c = T(1, 2, 5, 5), T(1, 2, 5, 5)
    c3 = T(1, 3, 5, 5)
    cases = [
        ("conv2d 3x3 pad1", lambda: _sum_sq(conv2d(x, k, b, 1, 1)), [x, k, b]),
        ("conv2d 3x3 stride2", lambda: _sum_sq(conv2d(x, k, b, 2, 0)), [x, k, b]),
        ("conv2d 1x1", lambda: _sum_sq(conv2d(x, k1, b1)), [x, k1, b1]),
    ]
    for fn in ("relu", "sigmoid", "abs", "square", "silu_plus_identity"):
        cases.append((f"pointwise {fn}", lambda fn=fn: _sum_sq(pointwise(m, fn)), [m]))
    cases += [
        ("channel_softmax", lambda: _sum_sq(combine(channel_softmax(a), c, "mul")), [a]),
        ("maxpool2", lambda: _sum_sq(resample(p, "maxpool2")), [p]),
        ("bilinear_up2", lambda: _sum_sq(resample(up, "bilinear_up2")), [up]),
        ("sumpool", lambda: _sum_sq(resample(sp, "sumpool", 2)), [sp]),
        ("mul", lambda: _sum_sq(combine(a, c, "mul")), [a, c]),
        ("add", lambda: _sum_sq(combine(a, c, "add")), [a, c]),
        ("sub", lambda: _sum_sq(combine(a, c, "sub")), [a, c]),
        ("concat_channels", lambda: _sum_sq(combine(a, c3, "concat_channels")), [a, c3]),
        ("sum_channels", lambda: _sum_sq(reduce(c3, "sum_channels")), [c3]),
        ("sum_all", lambda: pointwise(reduce(c3, "sum_all"), "square"), [c3]),
    ]
    return cases


def rc_points(n: int = 10, seed: int = 0, h: int = 12, w: int = 12, k: int = 5, s: int = 4,
              threshold: float = 0.9, margin: float = 1e-3):
    """Random error maps with no pixel within ``margin`` of its windows' EP/ET boundary."""
    rng = np.random.default_rng(seed)
    grid = losses.window_grid(h, w, k, s)
    found = []
    while len(found) < n:
        E = rng.uniform(0.0, 3.0, (1, 1, h, w))
        ok = True
        for r, c in grid.offsets:
            win = E[0, 0, r:r + k, c:c + k]
            if np.any(np.abs(win - win.max() * threshold) < margin):
                ok = False
                break
        if ok:
            found.append(E)
    return found


def grads_suite(include_network: bool = True, seed: int = 0) -> list[Check]:
    out = [Check(f"grad {name}", grad_check(fn, inputs), GRAD_TOL) for name, fn, inputs in primitive_checks(seed)]

    rng = np.random.default_rng(seed + 1)
    fa, fm = Tensor(rng.standard_normal((1, 6, 4, 4))), Tensor(rng.standard_normal((1, 6, 4, 4)))
    tgt = rng.standard_normal((1, 6, 4, 4))

    def sb():
        f_out, f_wei = model.soft_block(fa, fm)
        return combine(reduce(combine(f_out, Tensor(tgt), "mul"), "sum_all"), _sum_sq(f_wei), "add")

    out.append(Check("grad soft_block", grad_check(sb, [fa, fm]), GRAD_TOL))

    cfg = losses.LossConfig(window_k=5, stride_s=4, threshold=0.9)
    worst = 0.0
    for E in rc_points(10, seed):
        e = Tensor(E)
        worst = max(worst, grad_check(lambda: losses.rc_loss(e, cfg), [e]))
    out.append(Check("grad rc_loss (10 random maps)", worst, GRAD_TOL))

    if include_network:
        out.append(network_grad_check(seed))
    return out


def network_grad_check(seed: int = 0, eps: float = 1e-5) -> Check:
    """Whole tiny network under total_loss, against image and every small parameter.

    Elements whose +-eps stencil changes a relu/abs sign, pool argmax or loss
    mask are skipped (and counted). The relative-error floor is the resolution
    of the difference quotient, ``eps_mach * |f| / (eps * tol)``: gradients
    smaller than that cannot be confirmed to ``tol`` by any central difference.
    """
    cfg = tiny_config()
    params = generic_params(cfg, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    img = Tensor(rng.random((1, 3, 32, 32)))
    gt = Tensor(rng.random((1, 1, 4, 4)))
    lcfg = losses.LossConfig(window_k=3, stride_s=2, threshold=0.9)
    fn = lambda: losses.total_loss(model.network_forward(img, params, cfg), gt, lcfg)
    small = [t for name, t in params.items() if t.data.size <= 64]
    floor = np.finfo(np.float64).eps * abs(fn().item()) / (eps * GRAD_TOL)
    res = grad_check_detail(fn, [img] + small, eps=eps, floor=floor, skip_kinks=True)
    name = f"grad network total_loss (C=16, 32x32; {res.checked} checked, {res.skipped} at kinks)"
    return Check(name, res.worst, GRAD_TOL)


# -- oracle suites ----------------------------------------------------------------------

def rcloss_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for h, w, k, s, thr in [(12, 12, 5, 4, 0.9), (10, 13, 4, 3, 0.95), (16, 16, 9, 7, 0.8), (7, 7, 7, 1, 1.0),
                            (9, 11, 3, 3, 0.5), (8, 8, 5, 2, 0.99)]:
        E = rng.uniform(0, 3, (2, 1, h, w))
        got = losses.rc_loss(Tensor(E), losses.LossConfig(window_k=k, stride_s=s, threshold=thr)).item()
        ref = rc_loss_oracle(E, k, s, thr)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
    checks = [Check("rc_loss vs scalar window oracle (relative)", worst, 1e-12)]

    bad = 0
    for h in range(1, 33):
        for w in range(1, 33):
            for k in range(1, min(h, w) + 1):
                for s in range(1, k + 1):
                    grid = losses.window_grid(h, w, k, s)
                    if coverage_counts(h, w, grid).min() < 1 or len(set(grid.offsets)) != len(grid.offsets) \
                            or list(grid.offsets) != sorted(grid.offsets):
                        bad += 1
    checks.append(Check("window_grid exhaustive coverage (h,w <= 32)", float(bad), 0.5))

    g = losses.window_grid(50, 50, 27, 23)
    ok = g.offsets == ((0, 0), (0, 23), (23, 0), (23, 23)) and coverage_counts(50, 50, g).min() >= 1
    checks.append(Check("window_grid 50/27/23 -> offsets {0,23}^2", 0.0 if ok else 1.0, 0.5))
    return checks


def oracle_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        C, h, w = int(rng.integers(1, 9)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
        fa = rng.standard_normal((1, C, h, w)) * 3
        fm = rng.standard_normal((1, C, h, w))
        _, f_wei = model.soft_block(Tensor(fa), Tensor(fm))
        worst = max(worst, float(np.abs(f_wei.data - f_wei_oracle(fa, fm)).max()))
    checks = [Check("soft_block f_wei vs per-pixel oracle", worst, 1e-10)]

    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 200))
        W, H = int(rng.integers(2, 16)) * 8, int(rng.integers(2, 16)) * 8
        ann = AnnotationSet("r", W, H, rng.uniform([0, 0], [W, H], (n, 2)))
        for dm in (render_fixed(ann, float(rng.uniform(0.5, 8))), render_adaptive(ann)):
            worst = max(worst, abs(dm.values.sum() - n) / n)
            worst = max(worst, abs(to_target_grid(dm).values.sum() - dm.values.sum()) / n)
    checks.append(Check("label mass conservation (relative)", worst, 1e-6))

    mae, mse = mae_mse([(0.0, 3.0), (0.0, -4.0)])
    checks.append(Check("MAE/MSE residuals {3,-4}", abs(mae - 3.5) + abs(mse - math.sqrt(12.5)), 1e-7))
    return checks


SUITES = {
    "grads": grads_suite,
    "rcloss": rcloss_suite,
    "oracles": oracle_suite,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn()]
    return SUITES[name]()
