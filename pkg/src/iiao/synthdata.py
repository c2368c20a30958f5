"""Synthetic crowd scenes: dark discs ("heads") on simple backgrounds.

Layout written by :func:`generate_split`::

    out/manifest.json
    out/train/scene_0000.ppm   out/train/scene_0000.json
    out/test/scene_0005.ppm    out/test/scene_0005.json
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .densitymap import AnnotationSet, load_annotations

BACKGROUNDS = ("flat", "gradient", "noise")


@dataclass
class SceneSpec:
    width: int = 128
    height: int = 128
    n_points: int = 30
    head_radius_range: tuple[float, float] = (2.0, 4.0)
    background: str = "gradient"
    clustered: bool = False
    seed: int = 0

    def __post_init__(self):
        self.head_radius_range = tuple(float(r) for r in self.head_radius_range)
        if self.n_points < 0:
            raise ValueError(f"n_points must be >= 0, got {self.n_points}")
        lo, hi = self.head_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"head_radius_range must be positive and ordered, got {self.head_radius_range}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    H, W = spec.height, spec.width
    if spec.background == "flat":
        return np.broadcast_to(rng.uniform(0.45, 0.85, (3, 1, 1)), (3, H, W)).copy()
    if spec.background == "gradient":
        c0, c1 = rng.uniform(0.45, 0.9, (2, 3, 1, 1))
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:H, 0:W]
        t = np.cos(angle) * xx / max(W - 1, 1) + np.sin(angle) * yy / max(H - 1, 1)
        t = (t - t.min()) / max(np.ptp(t), 1e-12)
        return c0 + (c1 - c0) * t[None]
    base = rng.uniform(0.5, 0.8, (3, 1, 1))
    return base + 0.08 * rng.standard_normal((3, H, W))


def _sample_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n, W, H = spec.n_points, spec.width, spec.height
    if n == 0:
        return np.zeros((0, 2))
    if not spec.clustered:
        return rng.uniform([0, 0], [W, H], size=(n, 2))
    n_clusters = int(rng.integers(1, 5))
    centers = rng.uniform([0, 0], [W, H], size=(n_clusters, 2))
    spreads = rng.uniform(0.05, 0.2, n_clusters) * min(W, H)
    labels = rng.integers(0, n_clusters, n)
    pts = np.empty((n, 2))
    for i, c in enumerate(labels):
        while True:
            p = rng.normal(centers[c], spreads[c])
            if 0 <= p[0] < W and 0 <= p[1] < H:
                pts[i] = p
                break
    return pts


def generate(spec: SceneSpec, image_id: str = "scene") -> tuple[np.ndarray, AnnotationSet]:
    """Render one scene; returns a 3 x H x W image in [0, 1] and its head centres."""
    rng = np.random.default_rng(spec.seed)
    img = _background(spec, rng)
    pts = _sample_points(spec, rng)
    radii = rng.uniform(*spec.head_radius_range, size=len(pts))
    tones = rng.uniform(0.12, 0.32, size=(len(pts), 3))
    H, W = spec.height, spec.width
    for (x, y), r, tone in zip(pts, radii, tones):
        r0, r1 = max(int(np.floor(y - r)), 0), min(int(np.ceil(y + r)) + 1, H)
        c0, c1 = max(int(np.floor(x - r)), 0), min(int(np.ceil(x + r)) + 1, W)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        d = np.hypot(xx - x, yy - y)
        disc = d <= r
        rim = disc & (d > r - 1.0)
        patch = img[:, r0:r1, c0:c1]
        patch[:, disc] = tone[:, None]
        patch[:, rim] = 0.5 * tone[:, None]
    img = np.clip(img, 0.0, 1.0)
    return img, AnnotationSet(image_id, W, H, pts)


# -- image files -------------------------------------------------------------------

def write_ppm(img: np.ndarray, path) -> None:
    """Binary 8-bit PPM from a 3 x H x W array in [0, 1]."""
    _, H, W = img.shape
    pix = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P6":
        raise ValueError(f"{path}: not a binary PPM")
    W, H, maxval = map(int, tokens[1:])
    pix = np.frombuffer(raw[pos:pos + W * H * 3], dtype=np.uint8).reshape(H, W, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / maxval


def write_image(img: np.ndarray, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        pix = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(pix).save(path)
    else:
        write_ppm(img, path)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    from PIL import Image

    pix = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return pix.transpose(2, 0, 1)


# -- dataset splits -----------------------------------------------------------------

def _write_scenes(out: Path, scenes: list[dict], template: SceneSpec, fmt: str) -> None:
    for entry in scenes:
        spec = replace(template, n_points=entry["n_points"], seed=entry["seed"])
        img, ann = generate(spec, entry["id"])
        d = out / entry["split"]
        d.mkdir(parents=True, exist_ok=True)
        write_image(img, d / f"{entry['id']}.{fmt}")
        (d / f"{entry['id']}.json").write_text(json.dumps(ann.to_json()))


def generate_split(out_dir, n_train: int, n_test: int, template: SceneSpec | None = None, seed: int = 0,
                   count_range: tuple[int, int] = (10, 300), fmt: str = "ppm") -> Path:
    """Write ``n_train + n_test`` scenes and a manifest recording every scene seed."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must both be >= 1")
    lo, hi = count_range
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid count_range {count_range}")
    template = template or SceneSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_train + n_test):
        scenes.append({
            "split": "train" if i < n_train else "test",
            "id": f"scene_{i:04d}",
            "seed": int(rng.integers(0, 2**31 - 1)),
            "n_points": int(rng.integers(lo, hi + 1)),
        })
    manifest = {
        "seed": seed,
        "format": fmt,
        "count_range": [lo, hi],
        "template": asdict(template),
        "scenes": scenes,
    }
    _write_scenes(out, scenes, template, fmt)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def regenerate(manifest_path, out_dir) -> Path:
    """Rebuild every scene listed in a manifest."""
    manifest = json.loads(Path(manifest_path).read_text())
    template = SceneSpec(**manifest["template"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_scenes(out, manifest["scenes"], template, manifest["format"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_split(split_dir) -> list[tuple[np.ndarray, AnnotationSet]]:
    """Load every (image, annotations) pair in a directory, sorted by id."""
    split_dir = Path(split_dir)
    items = []
    for ann_path in sorted(split_dir.glob("*.json")):
        if ann_path.name == "manifest.json" or ann_path.name.endswith(".dims.json"):
            continue
        img_path = next((p for p in (ann_path.with_suffix(s) for s in (".ppm", ".png")) if p.exists()), None)
        if img_path is None:
            raise FileNotFoundError(f"no image next to {ann_path}")
        items.append((read_image(img_path), load_annotations(ann_path, "json")))
    return items
