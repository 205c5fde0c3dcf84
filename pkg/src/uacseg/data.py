"""Procedural two-domain shapes benchmark.

Scenes are sampled once per image (geometry plus base colours) and rendered
through a DomainStyle; only the style differs between the source and the
target domain.  Label maps are rasterised from the same shape list with
later shapes occluding earlier ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb

from . import io
from .augment import rotate_hue
from .segcore import IGNORE_VALUE

SHAPE_NAMES = ("circle", "rectangle", "triangle", "stripe")
SPLITS = ("source", "target_train", "target_eval")


class LabelAccessError(PermissionError):
    """Raised on any attempt to read target-train labels through the training interface."""


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_shape_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 5)
    min_visible: int = 12
    # (hue, value) centre per shape class; None spreads hues evenly at random value
    class_colors: tuple | None = ((0.0, 0.85), (0.5, 0.85), (0.0, 0.5), (0.5, 0.5))
    hue_jitter: float = 0.12
    value_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        if self.class_colors is not None:
            cols = tuple((float(h), float(v)) for h, v in self.class_colors)
            object.__setattr__(self, "class_colors", cols)
            if len(cols) != self.num_shape_classes:
                raise ValueError("class_colors needs one (hue, value) pair per shape class")
        if not 1 <= self.num_shape_classes <= len(SHAPE_NAMES):
            raise ValueError(f"num_shape_classes must be in [1, {len(SHAPE_NAMES)}]")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image {self.shapes_per_image}")
        if self.height < 8 or self.width < 8:
            raise ValueError("scene must be at least 8x8")

    @property
    def num_classes(self) -> int:
        return self.num_shape_classes + 1

    @property
    def class_names(self) -> list[str]:
        return ["background", *SHAPE_NAMES[: self.num_shape_classes]]


@dataclass(frozen=True)
class DomainStyle:
    hue_shift: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    texture_amplitude: float = 0.03
    background_palette: tuple = ((0.45, 0.45, 0.42), (0.62, 0.6, 0.55), (0.35, 0.38, 0.4), (0.55, 0.5, 0.45))

    def __post_init__(self):
        object.__setattr__(
            self, "background_palette", tuple(tuple(float(c) for c in col) for col in self.background_palette)
        )
        if self.contrast < 0 or self.texture_amplitude < 0:
            raise ValueError("contrast and texture_amplitude must be >= 0")
        if not self.background_palette or any(len(c) != 3 for c in self.background_palette):
            raise ValueError("background_palette must be a non-empty list of RGB triples")


SOURCE_STYLE = DomainStyle()
TARGET_STYLE = DomainStyle(hue_shift=0.15, brightness=-0.1, texture_amplitude=0.1)


@dataclass(frozen=True)
class Shape:
    cls: int
    kind: str
    params: dict
    color: tuple[float, float, float]


@dataclass
class Scene:
    height: int
    width: int
    shapes: list[Shape]
    background: tuple[int, int]
    gradient_angle: float


def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys + 0.5, xs + 0.5


def shape_mask(shape: Shape, h: int, w: int) -> np.ndarray:
    """Boolean coverage of pixel centres by ``shape``."""
    y, x = _grid(h, w)
    p = shape.params
    if shape.kind == "circle":
        return (x - p["cx"]) ** 2 + (y - p["cy"]) ** 2 <= p["r"] ** 2
    if shape.kind == "rectangle":
        c, s = math.cos(p["angle"]), math.sin(p["angle"])
        u = (x - p["cx"]) * c + (y - p["cy"]) * s
        v = -(x - p["cx"]) * s + (y - p["cy"]) * c
        return (np.abs(u) <= p["hw"]) & (np.abs(v) <= p["hh"])
    if shape.kind == "triangle":
        (x0, y0), (x1, y1), (x2, y2) = p["vertices"]
        d0 = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        d1 = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        d2 = (x0 - x2) * (y - y2) - (y0 - y2) * (x - x2)
        return ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    if shape.kind == "stripe":
        nx, ny = -math.sin(p["angle"]), math.cos(p["angle"])
        return np.abs((x - p["px"]) * nx + (y - p["py"]) * ny) <= p["half_width"]
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def rasterize(scene: Scene) -> np.ndarray:
    labels = np.zeros((scene.height, scene.width), dtype=np.int64)
    for shape in scene.shapes:
        labels[shape_mask(shape, scene.height, scene.width)] = shape.cls
    return labels


def _sample_shape(cls: int, spec: SceneSpec, rng: np.random.Generator) -> Shape:
    h, w = spec.height, spec.width
    size = min(h, w)
    kind = SHAPE_NAMES[cls - 1]
    cx = float(rng.uniform(0.15, 0.85) * w)
    cy = float(rng.uniform(0.15, 0.85) * h)
    angle = float(rng.uniform(0.0, math.pi))
    if kind == "circle":
        params = {"cx": cx, "cy": cy, "r": float(rng.uniform(0.08, 0.18) * size)}
    elif kind == "rectangle":
        params = {
            "cx": cx, "cy": cy, "angle": angle,
            "hw": float(rng.uniform(0.08, 0.2) * size), "hh": float(rng.uniform(0.05, 0.14) * size),
        }
    elif kind == "triangle":
        r = float(rng.uniform(0.12, 0.24) * size)
        verts = []
        for k in range(3):
            a = angle + 2 * math.pi * k / 3 + float(rng.uniform(-0.25, 0.25))
            verts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
        params = {"vertices": verts}
    else:
        params = {"px": cx, "py": cy, "angle": angle, "half_width": float(rng.uniform(0.03, 0.06) * size)}
    if spec.class_colors is None:
        centre, val = (cls - 1) / spec.num_shape_classes, None
    else:
        centre, val = spec.class_colors[cls - 1]
    hue = (centre + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
    sat = rng.uniform(0.6, 0.9)
    if val is None:
        val = rng.uniform(0.65, 0.95)
    else:
        val = float(np.clip(val + rng.uniform(-spec.value_jitter, spec.value_jitter), 0.0, 1.0))
    color = tuple(float(c) for c in hsv_to_rgb([hue, sat, val]))
    return Shape(cls, kind, params, color)


def sample_scene(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 100) -> Scene:
    """Sample a scene in which every shape keeps at least ``min_visible`` pixels."""
    for _ in range(max_tries):
        n = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        classes = rng.integers(1, spec.num_shape_classes + 1, size=n)
        shapes = [_sample_shape(int(c), spec, rng) for c in classes]
        npal = 4
        scene = Scene(
            spec.height, spec.width, shapes,
            background=(int(rng.integers(0, npal)), int(rng.integers(0, npal))),
            gradient_angle=float(rng.uniform(0, 2 * math.pi)),
        )
        labels = np.zeros((spec.height, spec.width), dtype=np.int64)
        owner = np.full((spec.height, spec.width), -1)
        for i, s in enumerate(shapes):
            m = shape_mask(s, spec.height, spec.width)
            labels[m] = s.cls
            owner[m] = i
        visible = np.bincount(owner[owner >= 0], minlength=n)
        if visible.min() >= spec.min_visible:
            return scene
    raise RuntimeError("could not sample a scene with all shapes visible; relax min_visible")


def _texture(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(size=(h // 8 + 2, w // 8 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    smooth = (
        c[y0][:, x0] * (1 - fy) * (1 - fx) + c[y0 + 1][:, x0] * fy * (1 - fx)
        + c[y0][:, x0 + 1] * (1 - fy) * fx + c[y0 + 1][:, x0 + 1] * fy * fx
    )
    fine = rng.normal(size=(h, w))
    return 0.6 * smooth + 0.4 * fine


def render(scene: Scene, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Render ``scene`` as an ``H x W x 3`` float32 image in [0, 1]."""
    h, w = scene.height, scene.width
    y, x = _grid(h, w)
    pal = style.background_palette
    c0 = np.array(pal[scene.background[0] % len(pal)])
    c1 = np.array(pal[scene.background[1] % len(pal)])
    proj = (x / w - 0.5) * math.cos(scene.gradient_angle) + (y / h - 0.5) * math.sin(scene.gradient_angle)
    t = np.clip(proj + 0.5, 0, 1)[..., None]
    img = c0 * (1 - t) + c1 * t
    for s in scene.shapes:
        img[shape_mask(s, h, w)] = s.color
    if style.hue_shift:
        img = rotate_hue(np.clip(img, 0, 1), style.hue_shift)
    img = (img - 0.5) * style.contrast + 0.5 + style.brightness
    if style.texture_amplitude:
        img = img + style.texture_amplitude * _texture(h, w, rng)[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_pair(spec: SceneSpec, style: DomainStyle, seed_key) -> tuple[np.ndarray, np.ndarray, Scene]:
    rng = np.random.default_rng(seed_key)
    scene = sample_scene(spec, rng)
    return render(scene, style, rng), rasterize(scene), scene


@dataclass
class Split:
    """Images with optional labels; ``labels`` raises when the split is label-hidden."""

    name: str
    images: np.ndarray
    _labels: np.ndarray | None = field(default=None, repr=False)
    labels_hidden: bool = False

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        if self.labels_hidden:
            raise LabelAccessError(f"labels of split {self.name!r} are not available for training")
        if self._labels is None:
            raise ValueError(f"split {self.name!r} has no labels")
        return self._labels


@dataclass
class DomainPairDataset:
    root: Path | None
    source: Split
    target_train: Split
    target_eval: Split
    num_classes: int
    class_names: list[str]


def generate_dataset(
    out_dir,
    spec: SceneSpec = SceneSpec(),
    source_style: DomainStyle = SOURCE_STYLE,
    target_style: DomainStyle = TARGET_STYLE,
    counts: dict | None = None,
) -> Path:
    """Write the three splits as PNG trees plus ``dataset.json``; deterministic in ``spec.seed``.

    Target-train labels go to ``target_train/heldout_labels`` and are never
    loaded by :func:`load_dataset`.
    """
    counts = dict(counts or {"source": 200, "target_train": 200, "target_eval": 64})
    for split in SPLITS:
        if counts.get(split, 0) < 1:
            raise ValueError(f"split {split!r} needs at least one image")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e

    styles = {"source": source_style, "target_train": target_style, "target_eval": target_style}
    for si, split in enumerate(SPLITS):
        img_dir = out / split / "images"
        lab_dir = out / split / ("heldout_labels" if split == "target_train" else "labels")
        img_dir.mkdir(parents=True, exist_ok=True)
        lab_dir.mkdir(parents=True, exist_ok=True)
        for i in range(counts[split]):
            image, labels, _ = render_pair(spec, styles[split], [spec.seed, si, i])
            io.save_image(img_dir / f"{i:06d}.png", image)
            io.save_labels(lab_dir / f"{i:06d}.png", labels)

    meta = {
        "scene": asdict(spec),
        "source_style": asdict(source_style),
        "target_style": asdict(target_style),
        "counts": counts,
        "num_classes": spec.num_classes,
        "class_names": spec.class_names,
        "ignore_value": IGNORE_VALUE,
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def _load_dir(d: Path, loader) -> np.ndarray:
    files = sorted(d.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {d}")
    return np.stack([loader(f) for f in files])


def load_dataset(root) -> DomainPairDataset:
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root} is not a dataset directory (missing dataset.json)")
    meta = json.loads(meta_path.read_text())
    source = Split("source", _load_dir(root / "source/images", io.load_image),
                   _load_dir(root / "source/labels", io.load_labels))
    target_train = Split("target_train", _load_dir(root / "target_train/images", io.load_image),
                         labels_hidden=True)
    target_eval = Split("target_eval", _load_dir(root / "target_eval/images", io.load_image),
                        _load_dir(root / "target_eval/labels", io.load_labels))
    return DomainPairDataset(root, source, target_train, target_eval, meta["num_classes"], meta["class_names"])
