"""Point annotations to ground-truth density maps.

Coordinates are in pixels with pixel ``(row i, col j)`` centred at ``(x=j, y=i)``.

Every head contributes exactly unit mass: the separable Gaussian is truncated
at 4 sigma, clipped to the image and renormalised, so the map total equals the
annotation count up to floating point summation error.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

TRUNCATE = 4.0
CLAMP_MARGIN = 1e-3


class AnnotationError(ValueError):
    pass


@dataclass
class AnnotationSet:
    image_id: str
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    clamped: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: image dimensions must be positive, got {self.width}x{self.height}")
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise AnnotationError(f"{self.image_id}: non-finite point coordinates")
        dims = np.array([self.width, self.height], dtype=np.float64)
        bad = (pts < 0) | (pts >= dims)
        n_out = int(np.any(bad, axis=1).sum())
        if n_out:
            log.warning("%s: clamped %d out-of-bounds point(s)", self.image_id, n_out)
            pts = np.where(bad, np.clip(pts, 0.0, dims - CLAMP_MARGIN), pts)
        self.points = pts
        self.clamped += n_out

    @property
    def count(self) -> int:
        return len(self.points)

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "points": self.points.tolist()}


@dataclass
class DensityMap:
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> float:
        return float(self.values.sum())


def load_annotations(path, format: str | None = None, width: int | None = None,
                     height: int | None = None) -> AnnotationSet:
    """Read a JSON (``{"w","h","points"}``) or CSV (``x,y`` rows) annotation file.

    CSV files carry no dimensions; pass ``width``/``height`` or place a sidecar
    ``<name>.dims.json`` holding ``{"w": .., "h": ..}`` next to the file.
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    image_id = path.stem
    if fmt == "json":
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        for key in ("w", "h", "points"):
            if key not in obj:
                raise AnnotationError(f"{path}: missing field {key!r}")
        pts = obj["points"]
        for i, p in enumerate(pts):
            if not isinstance(p, (list, tuple)) or len(p) != 2:
                raise AnnotationError(f"{path}: field 'points[{i}]' is not an [x, y] pair")
        return AnnotationSet(image_id, int(obj["w"]), int(obj["h"]), np.array(pts, dtype=float).reshape(-1, 2))

    if fmt == "csv":
        if width is None or height is None:
            sidecar = path.with_suffix(".dims.json")
            if not sidecar.exists():
                raise AnnotationError(f"{path}: CSV annotations need width/height or a sidecar {sidecar.name}")
            dims = json.loads(sidecar.read_text())
            width, height = dims["w"], dims["h"]
        pts = []
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["x", "y"]:
                raise AnnotationError(f"{path}: line 1: expected header 'x,y', got {header!r}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    pts.append((float(row[0]), float(row[1])))
                except (ValueError, IndexError) as exc:
                    raise AnnotationError(f"{path}: line {lineno}: cannot parse {row!r}") from exc
        return AnnotationSet(image_id, int(width), int(height), np.array(pts, dtype=float).reshape(-1, 2))

    raise AnnotationError(f"{path}: unsupported annotation format {fmt!r}")


def save_annotations(ann: AnnotationSet, path) -> None:
    Path(path).write_text(json.dumps(ann.to_json()))


def _axis_weights(center: float, sigma: float, n: int) -> tuple[int, np.ndarray]:
    """Normalised 1-D Gaussian weights over pixel centres within 4 sigma, clipped to [0, n).

    Pixel ``i`` is centred at coordinate ``i``.
    """
    lo = max(int(np.ceil(center - TRUNCATE * sigma)), 0)
    hi = min(int(np.floor(center + TRUNCATE * sigma)), n - 1)
    home = min(max(int(round(center)), 0), n - 1)
    lo, hi = min(lo, home), max(hi, home)
    d = np.arange(lo, hi + 1) - center
    w = np.exp(-0.5 * (d / sigma) ** 2)
    w[np.abs(d) > TRUNCATE * sigma] = 0.0
    total = w.sum()
    if total == 0.0:
        w[:] = 0.0
        w[home - lo] = 1.0
        total = 1.0
    return lo, w / total


def _render(ann: AnnotationSet, sigmas: np.ndarray) -> DensityMap:
    out = np.zeros((ann.height, ann.width), dtype=np.float64)
    for (x, y), s in zip(ann.points, sigmas):
        c0, wx = _axis_weights(x, s, ann.width)
        r0, wy = _axis_weights(y, s, ann.height)
        out[r0:r0 + len(wy), c0:c0 + len(wx)] += np.outer(wy, wx)
    return DensityMap(out)


def render_fixed(ann: AnnotationSet, sigma: float = 4.0) -> DensityMap:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return _render(ann, np.full(ann.count, float(sigma)))


def adaptive_sigmas(points: np.ndarray, k: int = 3, beta: float = 0.3, sigma_min: float = 1.0,
                    sigma_max: float = 15.0) -> np.ndarray:
    """Per-point sigma = beta * mean distance to the k nearest other points, clamped."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if sigma_min > sigma_max:
        raise ValueError(f"sigma_min {sigma_min} exceeds sigma_max {sigma_max}")
    n = len(points)
    if n <= k:
        return np.full(n, float(sigma_max))
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return np.clip(beta * dist[:, 1:].mean(axis=1), sigma_min, sigma_max)


def render_adaptive(ann: AnnotationSet, k: int = 3, beta: float = 0.3, sigma_min: float = 1.0,
                    sigma_max: float = 15.0) -> DensityMap:
    return _render(ann, adaptive_sigmas(ann.points, k, beta, sigma_min, sigma_max))


def to_target_grid(dm: DensityMap, factor: int = 8) -> DensityMap:
    """Sum-pool by ``factor``; the total is preserved."""
    h, w = dm.values.shape
    if h % factor or w % factor:
        raise ValueError(f"density map {h}x{w} not divisible by factor {factor}")
    return DensityMap(dm.values.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3)))


# -- export ------------------------------------------------------------------

def save_csv(values: np.ndarray, path) -> None:
    """Write a 2-D grid as CSV with round-trip (repr) precision."""
    with open(path, "w", newline="") as fh:
        for row in np.asarray(values, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def save_pgm(values: np.ndarray, path) -> float:
    """16-bit binary PGM, max value scaled to 65535. Returns the scale factor.

    The header comment ``# scale <f>`` records it: ``value = pixel / f``.
    """
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    peak = float(v.max()) if v.size else 0.0
    factor = 65535.0 / peak if peak > 0 else 1.0
    pix = np.round(v * factor).astype(">u2")
    h, w = v.shape
    header = f"P5\n# scale {factor!r}\n{w} {h}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pix.tobytes())
    return factor


def load_pgm(path) -> tuple[np.ndarray, float]:
    raw = Path(path).read_bytes()
    tokens, factor, pos = [], 1.0, 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii").strip()
        pos = end + 1
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "scale":
                factor = float(parts[1])
            continue
        tokens.extend(line.split())
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(raw[pos:], dtype=dt, count=w * h).reshape(h, w)
    return pix.astype(np.float64) / factor, factor
