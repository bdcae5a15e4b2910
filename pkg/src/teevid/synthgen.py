"""Deterministic synthetic surveillance-style videos with exact box annotations.

Scenes are a textured static background, optional flickering "nuisance"
regions that are never annotated, and rectangles/ellipses that move along a
piecewise-constant velocity schedule. Ground truth comes straight from the
analytic object positions, so it is exact by construction.

On disk a video is a directory::

    frames/000000.png ...
    annotations.json
    scene.json        (optional; present when written from a generated video)
"""

from __future__ import annotations

import colorsys
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
from PIL import Image

from .errors import ConfigError, SchemaError
from .geometry import BoundingBox, ObjectAnnotation, SceneryLabel, label_from_motion, max_motion, motion_field

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["video_id", "width", "height", "frames"],
    "properties": {
        "video_id": {"type": "string"},
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["frame", "objects"],
                "properties": {
                    "frame": {"type": "integer", "minimum": 0},
                    "objects": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["object_id", "class_id", "bbox"],
                            "properties": {
                                "object_id": {"type": "string"},
                                "class_id": {"type": "integer"},
                                "bbox": {
                                    "type": "array",
                                    "items": {"type": "number"},
                                    "minItems": 4,
                                    "maxItems": 4,
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class MotionSegment:
    """Constant velocity ``(vx, vy)`` px/frame applied on frames ``start < t <= end``."""

    start: int
    end: int
    vx: float
    vy: float


@dataclass(frozen=True)
class ObjectSpec:
    object_id: str
    x: float
    y: float
    w: float
    h: float
    shape: str = "rectangle"
    color: tuple[float, float, float] = (0.9, 0.2, 0.2)
    texture_amplitude: float = 0.05
    class_id: int = 0
    motion: tuple[MotionSegment, ...] = ()


@dataclass(frozen=True)
class BackgroundSpec:
    kind: str = "static"
    base: float = 0.45
    texture_amplitude: float = 0.08
    flicker_amplitude: float = 0.0
    flicker_region: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class SceneConfig:
    video_id: str
    num_frames: int
    seed: int
    width: int = 224
    height: int = 224
    objects: tuple[ObjectSpec, ...] = ()
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    noise_sigma: float = 0.0

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        objs = []
        for o in d.get("objects", ()):
            o = dict(o)
            o["motion"] = tuple(MotionSegment(**m) for m in o.get("motion", ()))
            o["color"] = tuple(o.get("color", (0.9, 0.2, 0.2)))
            objs.append(ObjectSpec(**o))
        d["objects"] = tuple(objs)
        bg = dict(d.get("background", {}))
        if bg.get("flicker_region") is not None:
            bg["flicker_region"] = tuple(bg["flicker_region"])
        d["background"] = BackgroundSpec(**bg)
        return cls(**d)


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    pixels: np.ndarray  # (H, W, 3) uint8
    annotations: tuple[ObjectAnnotation, ...]

    @property
    def image(self) -> np.ndarray:
        """Intensities in [0, 1] as float32, shape (H, W, 3)."""
        return self.pixels.astype(np.float32) / 255.0


@dataclass(frozen=True)
class SyntheticVideo:
    video_id: str
    width: int
    height: int
    frames: tuple[FrameRecord, ...]
    config: SceneConfig | None = None

    def __len__(self) -> int:
        return len(self.frames)


def object_offset(spec: ObjectSpec, t: int) -> tuple[float, float]:
    dx = dy = 0.0
    for seg in spec.motion:
        steps = min(max(t - seg.start, 0), seg.end - seg.start)
        dx += seg.vx * steps
        dy += seg.vy * steps
    return dx, dy


def object_box(spec: ObjectSpec, t: int) -> BoundingBox:
    dx, dy = object_offset(spec, t)
    return BoundingBox(spec.x + dx, spec.y + dy, spec.x + dx + spec.w, spec.y + dy + spec.h)


def validate_config(config: SceneConfig) -> None:
    if config.num_frames < 1:
        raise ConfigError("num_frames must be >= 1")
    if config.width < 1 or config.height < 1:
        raise ConfigError("canvas size must be positive")
    if not 0.0 <= config.noise_sigma <= 0.2:
        raise ConfigError(f"noise_sigma {config.noise_sigma} outside [0, 0.2]")
    if config.background.kind not in ("static", "dynamic"):
        raise ConfigError(f"unknown background kind {config.background.kind!r}")
    ids = [o.object_id for o in config.objects]
    if len(set(ids)) != len(ids):
        raise ConfigError("object ids must be unique")
    for spec in config.objects:
        if spec.shape not in ("rectangle", "ellipse"):
            raise ConfigError(f"unknown shape {spec.shape!r}")
        if spec.w <= 0 or spec.h <= 0:
            raise ConfigError(f"object {spec.object_id} has non-positive size")
        for seg in spec.motion:
            if seg.end < seg.start:
                raise ConfigError(f"object {spec.object_id}: motion segment ends before it starts")
        for t in range(config.num_frames):
            b = object_box(spec, t)
            if b.x0 < 0 or b.y0 < 0 or b.x1 > config.width or b.y1 > config.height:
                raise ConfigError(
                    f"object {spec.object_id} leaves the {config.width}x{config.height} canvas at frame {t}"
                )


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Blocky low-frequency texture in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, size=(h // cell + 2, w // cell + 2))
    fine = np.kron(coarse, np.ones((cell, cell)))[:h, :w]
    return fine + 0.25 * rng.uniform(-1.0, 1.0, size=(h, w))


def _coverage_1d(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [k, k+1) covered by [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1.0, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _ellipse_coverage(box: BoundingBox, height: int, width: int, ss: int = 4) -> np.ndarray:
    cov = np.zeros((height, width))
    c0, c1 = int(math.floor(box.x0)), int(math.ceil(box.x1))
    r0, r1 = int(math.floor(box.y0)), int(math.ceil(box.y1))
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).ravel()
    cx, cy = (box.x0 + box.x1) / 2, (box.y0 + box.y1) / 2
    rx, ry = box.width / 2, box.height / 2
    inside = ((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2 <= 1.0
    block = inside.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = block
    return cov


def _render_frame(config: SceneConfig, t: int, background: np.ndarray, textures: list[np.ndarray]) -> np.ndarray:
    h, w = config.height, config.width
    img = background.copy()
    bg = config.background
    if bg.kind == "dynamic" and bg.flicker_region is not None and bg.flicker_amplitude > 0:
        x0, y0, x1, y1 = bg.flicker_region
        frng = _rng(config.seed, 2, t)
        cov = np.outer(_coverage_1d(y0, y1, h), _coverage_1d(x0, x1, w))
        ripple = _smooth_texture(frng, h, w, cell=4)
        img += (bg.flicker_amplitude * cov * ripple)[:, :, None]
    for spec, tex in zip(config.objects, textures):
        box = object_box(spec, t)
        if spec.shape == "rectangle":
            cov = np.outer(_coverage_1d(box.y0, box.y1, h), _coverage_1d(box.x0, box.x1, w))
        else:
            cov = _ellipse_coverage(box, h, w)
        # texture is attached to the object frame so it moves with the object
        rows = np.clip(np.arange(h) - int(math.floor(box.y0)), 0, tex.shape[0] - 1)
        cols = np.clip(np.arange(w) - int(math.floor(box.x0)), 0, tex.shape[1] - 1)
        shade = spec.texture_amplitude * tex[np.ix_(rows, cols)]
        paint = np.asarray(spec.color)[None, None, :] + shade[:, :, None]
        img = img * (1.0 - cov[:, :, None]) + paint * cov[:, :, None]
    if config.noise_sigma > 0:
        img = img + _rng(config.seed, 3, t).normal(0.0, config.noise_sigma, size=img.shape)
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def generate_video(config: SceneConfig) -> SyntheticVideo:
    """Render every frame of ``config``; the output depends only on the config."""
    validate_config(config)
    h, w = config.height, config.width
    brng = _rng(config.seed, 0)
    tint = brng.uniform(-0.05, 0.05, size=3)
    bg = config.background
    background = bg.base + tint[None, None, :] + bg.texture_amplitude * _smooth_texture(brng, h, w)[:, :, None]
    textures = []
    for k, spec in enumerate(config.objects):
        trng = _rng(config.seed, 1, k)
        textures.append(_smooth_texture(trng, int(math.ceil(spec.h)) + 2, int(math.ceil(spec.w)) + 2, cell=4))
    frames = []
    for t in range(config.num_frames):
        anns = tuple(
            ObjectAnnotation(spec.object_id, spec.class_id, object_box(spec, t)) for spec in config.objects
        )
        frames.append(FrameRecord(t, _render_frame(config, t, background, textures), anns))
    return SyntheticVideo(config.video_id, w, h, tuple(frames), config)


def label_pairs(
    video: SyntheticVideo, interval: int, tau_var: float
) -> list[tuple[int, int, float, SceneryLabel]]:
    if interval < 1:
        raise ConfigError("interval must be >= 1")
    out = []
    for i in range(len(video) - interval):
        j = i + interval
        m = max_motion(motion_field(video.frames[i].annotations, video.frames[j].annotations))
        out.append((i, j, m, label_from_motion(m, tau_var)))
    return out


# ---------------------------------------------------------------------------
# dataset IO


def annotations_document(video: SyntheticVideo) -> dict:
    return {
        "video_id": video.video_id,
        "width": video.width,
        "height": video.height,
        "frames": [
            {
                "frame": fr.frame_index,
                "objects": [
                    {"object_id": a.object_id, "class_id": a.class_id, "bbox": a.box.as_list()}
                    for a in fr.annotations
                ],
            }
            for fr in video.frames
        ],
    }


def write_dataset(video: SyntheticVideo, directory: str | os.PathLike) -> Path:
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for fr in video.frames:
        Image.fromarray(fr.pixels, mode="RGB").save(root / "frames" / f"{fr.frame_index:06d}.png", compress_level=1)
    with open(root / "annotations.json", "w") as fh:
        json.dump(annotations_document(video), fh, indent=1)
        fh.write("\n")
    if video.config is not None:
        with open(root / "scene.json", "w") as fh:
            json.dump(video.config.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    return root


def parse_annotations(doc: object, path: str = "annotations.json") -> tuple[str, int, int, list[tuple[ObjectAnnotation, ...]]]:
    try:
        jsonschema.validate(doc, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path)
        raise SchemaError(f"{exc.message} (at /{where})", path) from None
    frames = sorted(doc["frames"], key=lambda f: f["frame"])
    indices = [f["frame"] for f in frames]
    if indices != list(range(len(frames))):
        missing = sorted(set(range(max(indices, default=-1) + 1)) - set(indices))
        raise SchemaError(f"frame entries must be contiguous from 0; missing {missing or 'duplicates'}", path)
    per_frame = []
    for f in frames:
        anns = []
        seen = set()
        for o in f["objects"]:
            if o["object_id"] in seen:
                raise SchemaError(f"duplicate object_id {o['object_id']!r} in frame {f['frame']}", path)
            seen.add(o["object_id"])
            try:
                box = BoundingBox.from_list(o["bbox"])
            except ValueError as exc:
                raise SchemaError(f"frame {f['frame']}: {exc}", path) from None
            anns.append(ObjectAnnotation(o["object_id"], int(o["class_id"]), box))
        per_frame.append(tuple(anns))
    return doc["video_id"], doc["width"], doc["height"], per_frame


def read_annotations(directory: str | os.PathLike):
    path = Path(directory) / "annotations.json"
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SchemaError("annotation file not found", str(path)) from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", str(path)) from None
    return parse_annotations(doc, str(path))


def read_dataset(directory: str | os.PathLike) -> SyntheticVideo:
    root = Path(directory)
    video_id, width, height, per_frame = read_annotations(root)
    frames = []
    for t, anns in enumerate(per_frame):
        png = root / "frames" / f"{t:06d}.png"
        if not png.exists():
            raise SchemaError(f"frame image for frame {t} is missing", str(png))
        with Image.open(png) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if pixels.shape != (height, width, 3):
            raise SchemaError(f"image shape {pixels.shape} does not match {height}x{width}", str(png))
        frames.append(FrameRecord(t, pixels, anns))
    config = None
    if (root / "scene.json").exists():
        with open(root / "scene.json") as fh:
            config = SceneConfig.from_dict(json.load(fh))
    return SyntheticVideo(video_id, width, height, tuple(frames), config)


# ---------------------------------------------------------------------------
# scene recipes


def _random_color(rng) -> tuple[float, float, float]:
    """A saturated, bright colour of uniformly random hue (always distinct from the grey background)."""
    r, g, b = colorsys.hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.6, 1.0), rng.uniform(0.75, 1.0))
    return float(round(r, 3)), float(round(g, 3)), float(round(b, 3))


def _place(rng: np.random.Generator, w: float, h: float, canvas: int, margin: float) -> tuple[float, float]:
    x = rng.uniform(margin, canvas - w - margin)
    y = rng.uniform(margin, canvas - h - margin)
    return float(round(x, 2)), float(round(y, 2))


def random_scene(
    video_id: str,
    seed: int,
    num_frames: int,
    regime: str,
    *,
    size: int = 224,
    num_objects: int | None = None,
    noise_sigma: float = 0.02,
    dynamic_background: bool | None = None,
    static_fraction: float = 0.9,
) -> SceneConfig:
    """Build a scene for one motion regime.

    Regimes:
      ``static``   nothing moves;
      ``slow``     objects drift at 0.5-2 px/frame;
      ``fast``     objects move at 3-8 px/frame with pauses;
      ``teleport`` objects jump to a disjoint location every few frames;
      ``hops``     about ``static_fraction`` of frames are fully static, the
                   rest hold nudge-then-jump hops (see ``_hops``).
    """
    if regime not in ("static", "slow", "fast", "teleport", "hops"):
        raise ConfigError(f"unknown regime {regime!r}")
    rng = _rng(seed, 100)
    n_obj = num_objects if num_objects is not None else int(rng.integers(1, 3))
    if dynamic_background is None:
        dynamic_background = bool(rng.random() < 0.5)
    flicker = None
    if dynamic_background:
        fw, fh = rng.uniform(40, 80), rng.uniform(30, 60)
        fx, fy = _place(rng, fw, fh, size, 2.0)
        flicker = (fx, fy, fx + round(fw, 2), fy + round(fh, 2))
    background = BackgroundSpec(
        kind="dynamic" if dynamic_background else "static",
        base=float(round(rng.uniform(0.3, 0.6), 3)),
        texture_amplitude=0.06,
        flicker_amplitude=0.12 if dynamic_background else 0.0,
        flicker_region=flicker,
    )
    margin = 2.0
    sizes, starts = [], []
    for _ in range(n_obj):
        w, h = float(round(rng.uniform(26, 56), 1)), float(round(rng.uniform(26, 56), 1))
        sizes.append((w, h))
        starts.append(_place(rng, w, h, size, margin))
    motions: list[list[MotionSegment]] = [[] for _ in range(n_obj)]
    if regime == "hops":
        motions = _hops(rng, starts, sizes, size, margin, num_frames, static_fraction)
    for k, ((w, h), (x, y)) in enumerate(zip(sizes, starts)):
        if regime in ("slow", "fast"):
            lo, hi = (0.5, 2.0) if regime == "slow" else (3.0, 8.0)
            motions[k] = _random_walk(rng, x, y, w, h, size, margin, num_frames, lo, hi, regime == "fast")
        elif regime == "teleport":
            motions[k] = _teleports(rng, x, y, w, h, size, margin, num_frames)
    objects = []
    for k, ((w, h), (x, y)) in enumerate(zip(sizes, starts)):
        color = _random_color(rng)
        shape = "ellipse" if rng.random() < 0.4 else "rectangle"
        objects.append(
            ObjectSpec(
                object_id=f"obj{k}",
                x=x,
                y=y,
                w=w,
                h=h,
                shape=shape,
                color=color,
                texture_amplitude=0.08,
                class_id=0,
                motion=tuple(motions[k]),
            )
        )
    return SceneConfig(
        video_id=video_id,
        num_frames=num_frames,
        seed=seed,
        width=size,
        height=size,
        objects=tuple(objects),
        background=background,
        noise_sigma=noise_sigma,
    )


def _random_walk(rng, x, y, w, h, size, margin, num_frames, lo, hi, pauses):
    """Piecewise-constant velocities that keep the box inside the canvas."""
    segs: list[MotionSegment] = []
    t = 0
    while t < num_frames - 1:
        length = int(rng.integers(4, 16))
        if pauses and rng.random() < 0.3:
            t += length
            continue
        length = min(length, num_frames - 1 - t)
        vx, vy = _velocity(rng, lo, hi)
        vx, vy = _fit_velocity(x, y, w, h, size, margin, vx, vy, length)
        segs.append(MotionSegment(t, t + length, vx, vy))
        x, y = x + vx * length, y + vy * length
        t += length
    return segs


def _hops(rng, starts, sizes, size, margin, num_frames, static_fraction, nudge=(0.04, 0.07)):
    """Hops spread evenly in time, one object per hop, all other frames static.

    A hop is a nudge (a shift of a few percent of the box, IoU above 0.8)
    followed on the next frame by a jump to a spot disjoint from both earlier
    footprints. Exactly ``round((num_frames - 1) * (1 - static_fraction))``
    frames carry motion; an odd count ends with a lone jump.
    """
    moving = max(1, int(round((num_frames - 1) * (1.0 - static_fraction))))
    lengths = [2] * (moving // 2) + [1] * (moving % 2)
    gap = (num_frames - 1 - moving) // (len(lengths) + 1)
    pos = [list(p) for p in starts]
    motions: list[list[MotionSegment]] = [[] for _ in starts]
    t = 0
    for length in lengths:
        t += gap
        k = int(rng.integers(len(starts)))
        w, h = sizes[k]
        x0, y0 = pos[k]
        if length == 2:
            step = rng.uniform(*nudge) * min(w, h)
            angle = rng.uniform(0, 2 * math.pi)
            vx, vy = float(round(step * math.cos(angle), 3)), float(round(step * math.sin(angle), 3))
            vx, vy = _fit_velocity(x0, y0, w, h, size, margin, vx, vy, 1)
            motions[k].append(MotionSegment(t, t + 1, vx, vy))
            pos[k] = [x0 + vx, y0 + vy]
            t += 1
        x, y = pos[k]
        lo_x, lo_y, hi_x, hi_y = min(x0, x), min(y0, y), max(x0, x) + w, max(y0, y) + h
        for _ in range(200):
            nx, ny = _place(rng, w, h, size, margin)
            if nx >= hi_x or nx + w <= lo_x or ny >= hi_y or ny + h <= lo_y:
                break
        seg = MotionSegment(t, t + 1, float(round(nx - x, 2)), float(round(ny - y, 2)))
        motions[k].append(seg)
        pos[k] = [x + seg.vx, y + seg.vy]
        t += 1
    return motions


def _velocity(rng, lo, hi):
    speed = rng.uniform(lo, hi)
    angle = rng.uniform(0, 2 * math.pi)
    return float(round(speed * math.cos(angle), 3)), float(round(speed * math.sin(angle), 3))


def _fit_velocity(x, y, w, h, size, margin, vx, vy, length):
    # reflect any component that would leave the canvas, then shrink if still needed
    if not margin <= x + vx * length <= size - w - margin:
        vx = -vx
    if not margin <= y + vy * length <= size - h - margin:
        vy = -vy
    for _ in range(30):
        if margin <= x + vx * length <= size - w - margin and margin <= y + vy * length <= size - h - margin:
            return vx, vy
        vx, vy = round(vx / 2, 3), round(vy / 2, 3)
    return 0.0, 0.0


def _teleports(rng, x, y, w, h, size, margin, num_frames):
    segs: list[MotionSegment] = []
    t = int(rng.integers(3, 10))
    while t < num_frames:
        for _ in range(50):
            nx, ny = _place(rng, w, h, size, margin)
            if nx >= x + w or nx + w <= x or ny >= y + h or ny + h <= y:
                break
        else:
            t += 1
            continue
        segs.append(MotionSegment(t - 1, t, float(round(nx - x, 2)), float(round(ny - y, 2))))
        # round-tripping through the velocity may leave float residue; keep the realised position
        x, y = x + segs[-1].vx, y + segs[-1].vy
        t += int(rng.integers(4, 12))
    return segs


def corpus_configs(
    prefix: str,
    seed: int,
    regimes: Sequence[str],
    videos_per_regime: int,
    num_frames: int,
    *,
    size: int = 224,
    noise_sigma: float = 0.02,
    static_fraction: float = 0.9,
) -> list[SceneConfig]:
    """Scene configs for a corpus, one seed fanned out per video."""
    ss = np.random.SeedSequence(seed)
    children = ss.generate_state(len(regimes) * videos_per_regime)
    configs = []
    k = 0
    for regime in regimes:
        for v in range(videos_per_regime):
            configs.append(
                random_scene(
                    f"{prefix}{regime}{v:02d}",
                    int(children[k]),
                    num_frames,
                    regime,
                    size=size,
                    noise_sigma=noise_sigma,
                    static_fraction=static_fraction,
                )
            )
            k += 1
    return configs
