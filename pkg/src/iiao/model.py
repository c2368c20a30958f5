"""IIAO counting network.

Encoder (13 conv layers, 4 max-pools, 1/16 deep path upsampled and fused with
the 1/8 skip) -> ``iiao_stack`` IIAO modules -> 1x1 regression head. Each IIAO
module runs the scale pyramid (ASP) and the attention unit on the same input,
forwards ``f_att * f_mul`` and emits a one-channel map
``sum_c softmax_c(f_att) * f_mul`` for intermediate supervision.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, ShapeError, channel_softmax, combine, concat_channels, conv2d, reduce, relu, resample, sigmoid

CHECKPOINT_FORMAT = "iiao-checkpoint"
CHECKPOINT_VERSION = 1

# conv layers per encoder block; blocks 4 and 5 share the last width
ENCODER_BLOCKS = (2, 2, 3, 3, 3)


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ModelConfig:
    base_channels: int = 64
    reduction_ratio: int = 16
    iiao_stack: int = 2
    encoder_widths: tuple[int, ...] = (16, 32, 64, 64)
    asp_kernels: tuple[tuple[int, int], ...] = ((1, 1), (1, 3), (1, 5), (3, 5))
    init_std: float = 0.01
    # "he" or "gaussian"; no pretrained backbone, so the encoder defaults to He init
    encoder_init: str = "he"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.asp_kernels = tuple((int(a), int(b)) for a, b in self.asp_kernels)

    def problems(self) -> list[str]:
        p = []
        C, r = self.base_channels, self.reduction_ratio
        if C <= 0 or C % 16:
            p.append(f"model.base_channels={C} must be a positive multiple of 16 (and hence of 4)")
        if r <= 0 or (C > 0 and C % r):
            p.append(f"model.reduction_ratio={r} must be positive and divide base_channels={C}")
        if self.iiao_stack < 1:
            p.append(f"model.iiao_stack={self.iiao_stack} must be >= 1")
        if len(self.encoder_widths) != 4 or any(w <= 0 for w in self.encoder_widths):
            p.append(f"model.encoder_widths={list(self.encoder_widths)} must be four positive ints")
        if len(self.asp_kernels) != 4 or any(k % 2 == 0 or k < 1 for pair in self.asp_kernels for k in pair):
            p.append("model.asp_kernels must be four pairs of odd kernel sizes")
        if self.init_std <= 0:
            p.append(f"model.init_std={self.init_std} must be positive")
        if self.encoder_init not in ("he", "gaussian"):
            p.append(f"model.encoder_init={self.encoder_init!r} must be 'he' or 'gaussian'")
        if self.dtype not in ("float64", "float32"):
            p.append(f"model.dtype={self.dtype!r} must be 'float64' or 'float32'")
        return p

    def validate(self) -> ModelConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["asp_kernels"] = [list(k) for k in self.asp_kernels]
        return d


@dataclass
class ForwardOutputs:
    f_wei_list: list[Tensor]
    f_pre: Tensor
    f_att_list: list[Tensor] = field(default_factory=list)


Params = dict[str, Tensor]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the order fixes the draw order of ``init_params``."""
    shapes: dict[str, tuple[int, ...]] = {}
    widths = list(config.encoder_widths) + [config.encoder_widths[-1]]
    cin = 3
    for b, (n, w) in enumerate(zip(ENCODER_BLOCKS, widths), start=1):
        for i in range(1, n + 1):
            shapes[f"encoder.conv{b}_{i}.weight"] = (w, cin, 3, 3)
            shapes[f"encoder.conv{b}_{i}.bias"] = (w,)
            cin = w
    C = config.base_channels
    shapes["encoder.fuse.weight"] = (C, widths[2] + widths[4], 1, 1)
    shapes["encoder.fuse.bias"] = (C,)
    q, e, red = C // 4, C // 16, C // config.reduction_ratio
    for m in range(config.iiao_stack):
        pre = f"iiao{m}"
        shapes[f"{pre}.asp.compress.weight"] = (q, C, 1, 1)
        shapes[f"{pre}.asp.compress.bias"] = (q,)
        for br, (k1, k2) in enumerate(config.asp_kernels):
            shapes[f"{pre}.asp.branch{br}.conv1.weight"] = (e, q, k1, k1)
            shapes[f"{pre}.asp.branch{br}.conv1.bias"] = (e,)
            shapes[f"{pre}.asp.branch{br}.conv2.weight"] = (q, e, k2, k2)
            shapes[f"{pre}.asp.branch{br}.conv2.bias"] = (q,)
        shapes[f"{pre}.tau.reduce.weight"] = (red, C, 1, 1)
        shapes[f"{pre}.tau.reduce.bias"] = (red,)
        shapes[f"{pre}.tau.restore.weight"] = (C, red, 1, 1)
        shapes[f"{pre}.tau.restore.bias"] = (C,)
    shapes["head.weight"] = (1, C, 1, 1)
    shapes["head.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig) -> Params:
    """Gaussian(0, init_std) kernels from a seeded generator, zero biases.

    Encoder kernels use He-normal scaling when ``encoder_init == "he"``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            std = config.init_std
            if name.startswith("encoder.") and config.encoder_init == "he":
                fan_in = shape[1] * shape[2] * shape[3]
                std = float(np.sqrt(2.0 / fan_in))
            arr = (rng.standard_normal(shape) * std).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params


def _conv(x: Tensor, params: Params, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], stride=1, padding=w.shape[-1] // 2)


def encoder_forward(image: Tensor, params: Params, config: ModelConfig) -> Tensor:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"encoder expects B x 3 x H x W, got {image.shape}")
    H, W = image.shape[2:]
    if H % 16 or W % 16:
        raise ShapeError(f"encoder input {H}x{W} must be divisible by 16")
    x = image
    skip = None
    for b, n in enumerate(ENCODER_BLOCKS, start=1):
        for i in range(1, n + 1):
            x = relu(_conv(x, params, f"encoder.conv{b}_{i}"))
        if b <= 4:
            x = resample(x, "maxpool2")
        if b == 3:
            skip = x
    x = resample(x, "bilinear_up2")
    return _conv(combine(skip, x, "concat_channels"), params, "encoder.fuse")


def asp_forward(f_in: Tensor, params: Params, prefix: str, config: ModelConfig) -> Tensor:
    """Adaptive scale pyramid: 1x1 compress to C/4, four two-conv branches, concat back to C."""
    comp = _conv(f_in, params, f"{prefix}.asp.compress")
    branches = []
    for br in range(len(config.asp_kernels)):
        h = relu(_conv(comp, params, f"{prefix}.asp.branch{br}.conv1"))
        branches.append(relu(_conv(h, params, f"{prefix}.asp.branch{br}.conv2")))
    return concat_channels(branches)


def tau_forward(f_in: Tensor, params: Params, prefix: str) -> Tensor:
    """Attention unit: sigmoid(1x1 restore(relu(1x1 reduce(f_in))))."""
    h = relu(_conv(f_in, params, f"{prefix}.tau.reduce"))
    return sigmoid(_conv(h, params, f"{prefix}.tau.restore"))


def soft_block(f_att: Tensor, f_mul: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(f_att * f_mul, sum_c softmax_c(f_att) * f_mul)``."""
    if f_att.shape != f_mul.shape:
        raise ShapeError(f"soft_block needs identical shapes, got {f_att.shape} and {f_mul.shape}")
    f_out = combine(f_att, f_mul, "mul")
    f_wei = reduce(combine(channel_softmax(f_att), f_mul, "mul"), "sum_channels")
    return f_out, f_wei


def iiao_forward(f_in: Tensor, params: Params, index: int, config: ModelConfig):
    prefix = f"iiao{index}"
    f_mul = asp_forward(f_in, params, prefix, config)
    f_att = tau_forward(f_in, params, prefix)
    f_out, f_wei = soft_block(f_att, f_mul)
    return f_out, f_wei, f_att


def network_forward(image: Tensor, params: Params, config: ModelConfig) -> ForwardOutputs:
    x = encoder_forward(image, params, config)
    weis, atts = [], []
    for m in range(config.iiao_stack):
        x, f_wei, f_att = iiao_forward(x, params, m, config)
        weis.append(f_wei)
        atts.append(f_att)
    f_pre = conv2d(x, params["head.weight"], params["head.bias"])
    return ForwardOutputs(weis, f_pre, atts)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: Params, config: ModelConfig, extra: dict | None = None) -> None:
    """JSON checkpoint; tensors stored as base64 little-endian float64 (bit-exact)."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": {
            name: {
                "shape": list(t.shape),
                "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, t in params.items()
        },
    }
    if extra:
        blob["extra"] = extra
    Path(path).write_text(json.dumps(blob, indent=1, sort_keys=False))


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an IIAO checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    config = ModelConfig(**blob["config"]).validate()
    dtype = np.dtype(config.dtype)
    params: Params = {}
    for name, entry in blob["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8").reshape(entry["shape"])
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise ValueError(f"{path}: parameter names do not match the embedded config")
    return params, config, blob.get("extra", {})
