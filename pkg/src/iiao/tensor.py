"""Minimal dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding a closure that maps the output
gradient to gradients for its parents. Calling :meth:`Tensor.backward` walks the
graph recorded by the most recent forward pass in reverse topological order;
nothing persists between forward calls.

Layout is row-major BCHW throughout. Subgradient conventions: ``abs'(0) = 0``,
``relu'(0) = 0``, and max-pool ties route the gradient to the first index of
the window (row-major).
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

# discrete branch choices (relu/abs signs, pool argmax, loss masks) of the current forward
_decisions: list[np.ndarray] | None = None


def note_decision(arr: np.ndarray) -> None:
    """Record a non-smooth branch choice while :func:`record_decisions` is active."""
    if _decisions is not None:
        _decisions.append(np.array(arr, copy=True))


@contextmanager
def record_decisions():
    global _decisions
    prev, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- container protocol ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the value buffer."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar --------------------------------------------------
    def __add__(self, other):
        return combine(self, _as_tensor(other, self), "add")

    def __sub__(self, other):
        return combine(self, _as_tensor(other, self), "sub")

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return combine(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of a BCHW input with an OIKK kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    B, C, H, W = x.shape
    O, I, KH, KW = kernel.shape
    if I != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has C={C}, kernel {kernel.shape} expects {I}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {O} output channels")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < KH or Wp < KW:
        raise ShapeError(f"conv2d kernel {KH}x{KW} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - KH) // stride + 1
    Wo = (Wp - KW) // stride + 1

    w = kernel.data
    if KH == 1 and KW == 1 and stride == 1 and padding == 0:
        w2 = w.reshape(O, C)
        out = np.einsum("oc,bchw->bohw", w2, x.data, optimize=True)
        if bias is not None:
            out += bias.data.reshape(1, O, 1, 1)

        def backward(g):
            gx = np.einsum("oc,bohw->bchw", w2, g, optimize=True) if x.requires_grad else None
            gw = (np.einsum("bohw,bchw->oc", g, x.data, optimize=True).reshape(w.shape)
                  if kernel.requires_grad else None)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

        parents = (x, kernel) + ((bias,) if bias is not None else ())
        return _make(out, parents, backward, "conv2d")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # columns: (B, Ho, Wo, C, KH, KW)
    win = np.lib.stride_tricks.sliding_window_view(xp, (KH, KW), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * KH * KW)
    w2 = w.reshape(O, C * KH * KW)
    out = (cols @ w2.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gm.T @ cols).reshape(w.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ w2).reshape(B, Ho, Wo, C, KH, KW)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(KH):
                for j in range(KW):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, kernel) + ((bias,) if bias is not None else ())
    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# elementwise maps
# ---------------------------------------------------------------------------

def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


POINTWISE = ("relu", "sigmoid", "abs", "square", "silu_plus_identity")


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Apply one of ``POINTWISE`` elementwise.

    ``silu_plus_identity`` is ``e * sigmoid(e) + e``, the inner term of the
    hard-point penalty.
    """
    v = x.data
    if fn == "relu":
        out = np.maximum(v, 0.0)
        note_decision(v > 0)
        deriv = lambda: (v > 0).astype(v.dtype)
    elif fn == "sigmoid":
        out = _sigmoid(v)
        deriv = lambda: out * (1.0 - out)
    elif fn == "abs":
        out = np.abs(v)
        note_decision(np.sign(v))
        deriv = lambda: np.sign(v)
    elif fn == "square":
        out = v * v
        deriv = lambda: 2.0 * v
    elif fn == "silu_plus_identity":
        s = _sigmoid(v)
        out = v * s + v
        deriv = lambda: s + v * s * (1.0 - s) + 1.0
    else:
        raise ValueError(f"unknown pointwise fn {fn!r}; expected one of {POINTWISE}")

    def backward(g):
        return (g * deriv(),)

    return _make(out, (x,), backward, fn)


def relu(x: Tensor) -> Tensor:
    return pointwise(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return pointwise(x, "sigmoid")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


# ---------------------------------------------------------------------------
# channel softmax
# ---------------------------------------------------------------------------

def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over axis 1 of a BCHW tensor, stabilised by max subtraction."""
    if x.ndim != 4:
        raise ShapeError(f"channel_softmax expects BCHW, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("channel_softmax needs at least one channel")
    z = x.data - x.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), backward, "channel_softmax")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _bilinear_up2_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centres (align_corners=False)."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = (o + 0.5) / 2.0 - 0.5
        i0 = int(np.floor(src))
        frac = src - i0
        lo, hi = min(max(i0, 0), n - 1), min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def resample(x: Tensor, mode: str, factor: int = 2) -> Tensor:
    """``maxpool2``, ``bilinear_up2`` or ``sumpool`` (by ``factor``) on a BCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"resample expects BCHW, got {x.shape}")
    B, C, H, W = x.shape
    if mode == "maxpool2":
        f = 2
    elif mode == "sumpool":
        f = int(factor)
        if f < 1:
            raise ValueError(f"sumpool factor must be >= 1, got {factor}")
    elif mode == "bilinear_up2":
        uh = _bilinear_up2_matrix(H, x.dtype)
        uw = _bilinear_up2_matrix(W, x.dtype)
        out = np.einsum("ih,bchw,jw->bcij", uh, x.data, uw, optimize=True)

        def backward(g):
            return (np.einsum("ih,bcij,jw->bchw", uh, g, uw, optimize=True),)

        return _make(out, (x,), backward, "bilinear_up2")
    else:
        raise ValueError(f"unknown resample mode {mode!r}")

    if H % f or W % f:
        raise ShapeError(f"{mode} needs spatial dims divisible by {f}, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // f, f, W // f, f)

    if mode == "sumpool":
        out = blocks.sum(axis=(3, 5))

        def backward(g):
            return (np.broadcast_to(g[:, :, :, None, :, None], blocks.shape).reshape(x.shape).copy(),)

        return _make(out, (x,), backward, "sumpool")

    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)  # first index wins on ties
    note_decision(idx)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (gx,)

    return _make(out, (x,), backward, "maxpool2")


# ---------------------------------------------------------------------------
# combination and reduction
# ---------------------------------------------------------------------------

def combine(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """Elementwise ``mul``/``add``/``sub`` or ``concat_channels`` along axis 1."""
    if mode in ("mul", "add", "sub"):
        if a.shape != b.shape:
            raise ShapeError(f"{mode} needs identical shapes, got {a.shape} and {b.shape}")
        if mode == "mul":
            out = a.data * b.data

            def backward(g):
                return (g * b.data if a.requires_grad else None,
                        g * a.data if b.requires_grad else None)
        elif mode == "add":
            out = a.data + b.data

            def backward(g):
                return g, g
        else:
            out = a.data - b.data

            def backward(g):
                return g, -g
        return _make(out, (a, b), backward, mode)

    if mode == "concat_channels":
        if a.ndim != 4 or b.ndim != 4:
            raise ShapeError(f"concat_channels expects BCHW tensors, got {a.shape} and {b.shape}")
        if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
            raise ShapeError(f"concat_channels needs matching B,H,W, got {a.shape} and {b.shape}")
        ca = a.shape[1]
        out = np.concatenate([a.data, b.data], axis=1)

        def backward(g):
            return g[:, :ca], g[:, ca:]

        return _make(out, (a, b), backward, "concat_channels")

    raise ValueError(f"unknown combine mode {mode!r}")


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    tensors = list(tensors)
    out = tensors[0]
    for t in tensors[1:]:
        out = combine(out, t, "concat_channels")
    return out


def reduce(x: Tensor, mode: str) -> Tensor:
    """``sum_channels`` (BCHW -> B1HW) or ``sum_all`` (-> shape ``()``)."""
    if mode == "sum_channels":
        if x.ndim != 4:
            raise ShapeError(f"sum_channels expects BCHW, got {x.shape}")
        out = x.data.sum(axis=1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)

        return _make(out, (x,), backward, "sum_channels")
    if mode == "sum_all":
        out = np.asarray(x.data.sum(), dtype=x.dtype)

        def backward(g):
            return (np.full(x.shape, g, dtype=x.dtype),)

        return _make(out, (x,), backward, "sum_all")
    raise ValueError(f"unknown reduce mode {mode!r}")


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    worst: float
    checked: int
    skipped: int


def _same_decisions(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_detail(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                      floor: float = 1e-8, skip_kinks: bool = False) -> GradCheckResult:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the computation from ``inputs`` on each call and return
    a scalar tensor. Inputs are perturbed in place and restored. Relative error
    is ``|a - n| / max(|a|, |n|, floor)``.

    With ``skip_kinks`` an element is excluded when the forward passes at
    ``x + eps`` and ``x - eps`` take different discrete branches (a relu or abs
    sign, a pool argmax, a loss mask): the stencil then straddles a point where
    the function is not differentiable and the difference quotient is not a
    derivative estimate.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar computation, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def evaluate():
        if not skip_kinks:
            return fn().item(), None
        with record_decisions() as rec:
            value = fn().item()
        return value, rec

    worst, checked, skipped = 0.0, 0, 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp, dp = evaluate()
            flat[i] = orig - eps
            fm, dm = evaluate()
            flat[i] = orig
            if skip_kinks and not _same_decisions(dp, dm):
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-8) -> float:
    """Worst relative error over every element; see :func:`grad_check_detail`."""
    return grad_check_detail(fn, inputs, eps, floor).worst
