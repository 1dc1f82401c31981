"""Deterministic synthetic videos: moving shapes over banded stuff regions.

A SceneSpec fully determines frames and ground truth. Shapes are drawn in
list order (later entries occlude earlier ones), stuff fills everything
else, so every pixel carries exactly one (class, id) assignment.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneSpecError

THING_KINDS = ("circle", "square", "triangle")
STUFF_KINDS = ("sky", "grass")
DEFAULT_CATEGORIES = THING_KINDS + STUFF_KINDS

COLOR_TABLE = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (235, 215, 50),
    "magenta": (210, 60, 200),
    "cyan": (60, 200, 215),
    "orange": (240, 140, 40),
    "purple": (130, 60, 190),
    "white": (245, 245, 245),
}
STUFF_COLOR_TABLE = {"sky": (140, 190, 235), "grass": (70, 160, 80)}


@dataclass
class ShapeSpec:
    kind: str                      # circle | square | triangle
    color: str
    size: float                    # radius / half-extent in pixels
    start: tuple[float, float]     # (row, col) centre at enter_frame
    velocity: tuple[float, float] = (0.0, 0.0)   # px per frame
    trajectory: str = "linear"     # linear | sinusoidal
    amplitude: float = 0.0         # sinusoidal row wobble
    period: float = 8.0
    enter_frame: int = 0
    exit_frame: int | None = None  # exclusive; None = last frame

    def center(self, t: int) -> tuple[float, float]:
        dt = t - self.enter_frame
        r = self.start[0] + self.velocity[0] * dt
        c = self.start[1] + self.velocity[1] * dt
        if self.trajectory == "sinusoidal":
            r += self.amplitude * math.sin(2.0 * math.pi * dt / self.period)
        return r, c

    def direction(self) -> str:
        dr, dc = self.velocity
        if abs(dr) < 1e-9 and abs(dc) < 1e-9:
            return "nowhere"
        if abs(dc) >= abs(dr):
            return "right" if dc > 0 else "left"
        return "down" if dr > 0 else "up"


@dataclass
class SceneSpec:
    seed: int
    frames: int
    height: int = 96
    width: int = 96
    shapes: list[ShapeSpec] = field(default_factory=list)
    sky_fraction: float = 0.45
    occlusion_pairs: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise SceneSpecError("degenerate canvas or frame count")
        seen_expr = set()
        for i, s in enumerate(self.shapes):
            if s.kind not in THING_KINDS:
                raise SceneSpecError(f"unknown shape kind {s.kind!r}")
            if s.color not in COLOR_TABLE:
                raise SceneSpecError(f"unknown color {s.color!r}")
            if 2 * s.size >= min(self.height, self.width):
                raise SceneSpecError(f"shape {i} larger than canvas")
            exit_frame = self.frames if s.exit_frame is None else s.exit_frame
            if not (0 <= s.enter_frame < exit_frame <= self.frames):
                raise SceneSpecError(f"shape {i}: enter_frame must precede exit_frame <= frames")
            expr = expression_for(s)
            if expr in seen_expr:
                raise SceneSpecError(f"expression {expr!r} does not uniquely identify a target")
            seen_expr.add(expr)
        for front, behind in self.occlusion_pairs:
            if not (0 <= behind < front < len(self.shapes)):
                raise SceneSpecError("occlusion pair must list (front, behind) with front drawn later")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "sky_fraction": self.sky_fraction,
            "occlusion_pairs": [list(p) for p in self.occlusion_pairs],
            "shapes": [{
                "kind": s.kind, "color": s.color, "size": s.size,
                "start": list(s.start), "velocity": list(s.velocity),
                "trajectory": s.trajectory, "amplitude": s.amplitude,
                "period": s.period, "enter_frame": s.enter_frame,
                "exit_frame": s.exit_frame,
            } for s in self.shapes],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        shapes = [ShapeSpec(
            kind=o["kind"], color=o["color"], size=o["size"],
            start=tuple(o["start"]), velocity=tuple(o["velocity"]),
            trajectory=o.get("trajectory", "linear"),
            amplitude=o.get("amplitude", 0.0), period=o.get("period", 8.0),
            enter_frame=o.get("enter_frame", 0), exit_frame=o.get("exit_frame"),
        ) for o in obj["shapes"]]
        return cls(seed=obj["seed"], frames=obj["frames"], height=obj["height"],
                   width=obj["width"], shapes=shapes,
                   sky_fraction=obj.get("sky_fraction", 0.45),
                   occlusion_pairs=[tuple(p) for p in obj.get("occlusion_pairs", [])])


def expression_for(shape: ShapeSpec) -> str:
    return f"the {shape.color} {shape.kind} moving {shape.direction()}"


@dataclass
class EntityInfo:
    entity_id: int
    category_id: int
    category: str
    is_thing: bool
    color: str
    expression: str
    enter_frame: int
    exit_frame: int


@dataclass
class GroundTruth:
    categories: tuple[str, ...]
    instance_maps: np.ndarray      # [V,H,W] int32, 0 = no thing
    semantic_maps: np.ndarray      # [V,H,W] int32 class ids (exhaustive)
    panoptic_class: np.ndarray     # [V,H,W] int32
    panoptic_id: np.ndarray        # [V,H,W] int32, 0 for stuff
    entities: list[EntityInfo]
    prompt_points: dict[int, list[tuple[int, int]]]

    def entity_mask(self, entity_id: int, frame: int) -> np.ndarray:
        ent = next(e for e in self.entities if e.entity_id == entity_id)
        if ent.is_thing:
            return self.instance_maps[frame] == entity_id
        return self.semantic_maps[frame] == ent.category_id

    def entity_masks(self, entity_id: int) -> np.ndarray:
        return np.stack([self.entity_mask(entity_id, t)
                         for t in range(self.instance_maps.shape[0])])


def _shape_mask(shape: ShapeSpec, t: int, height: int, width: int) -> np.ndarray:
    cy, cx = shape.center(t)
    yy, xx = np.mgrid[0:height, 0:width]
    dy = yy - cy
    dx = xx - cx
    s = shape.size
    if shape.kind == "circle":
        return dy * dy + dx * dx <= s * s
    if shape.kind == "square":
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    # upward triangle: apex at (cy-s, cx), base corners (cy+s, cx+-s)
    return (np.abs(dy) <= s) & (np.abs(dx) <= (dy + s) / 2.0)


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, GroundTruth]:
    """Rasterize a scene; returns (frames float32 [V,3,H,W] in [0,1], gt)."""
    spec.validate()
    v, h, w = spec.frames, spec.height, spec.width
    categories = DEFAULT_CATEGORIES
    sky_rows = int(round(h * spec.sky_fraction))
    sky_id = categories.index("sky")
    grass_id = categories.index("grass")

    base_semantic = np.full((h, w), grass_id, dtype=np.int32)
    base_semantic[:sky_rows] = sky_id
    base_rgb = np.empty((h, w, 3), dtype=np.uint8)
    base_rgb[:sky_rows] = STUFF_COLOR_TABLE["sky"]
    base_rgb[sky_rows:] = STUFF_COLOR_TABLE["grass"]

    frames = np.empty((v, 3, h, w), dtype=np.float32)
    instance = np.zeros((v, h, w), dtype=np.int32)
    semantic = np.empty((v, h, w), dtype=np.int32)

    entities: list[EntityInfo] = []
    for idx, shape in enumerate(spec.shapes):
        eid = idx + 1
        entities.append(EntityInfo(
            entity_id=eid, category_id=categories.index(shape.kind),
            category=shape.kind, is_thing=True, color=shape.color,
            expression=expression_for(shape), enter_frame=shape.enter_frame,
            exit_frame=spec.frames if shape.exit_frame is None else shape.exit_frame))
    next_id = len(spec.shapes) + 1
    for stuff in STUFF_KINDS:
        entities.append(EntityInfo(
            entity_id=next_id, category_id=categories.index(stuff),
            category=stuff, is_thing=False, color=stuff,
            expression=f"the {stuff}", enter_frame=0, exit_frame=spec.frames))
        next_id += 1

    for t in range(v):
        rgb = base_rgb.copy()
        semantic[t] = base_semantic
        for idx, shape in enumerate(spec.shapes):
            exit_frame = spec.frames if shape.exit_frame is None else shape.exit_frame
            if not (shape.enter_frame <= t < exit_frame):
                continue
            mask = _shape_mask(shape, t, h, w)
            rgb[mask] = COLOR_TABLE[shape.color]
            semantic[t][mask] = categories.index(shape.kind)
            instance[t][mask] = idx + 1
        frames[t] = rgb.transpose(2, 0, 1).astype(np.float32) / 255.0

    panoptic_id = instance.copy()

    rng = np.random.default_rng(spec.seed)
    prompt_points: dict[int, list[tuple[int, int]]] = {}
    for ent in entities:
        mask0 = (instance[ent.enter_frame] == ent.entity_id) if ent.is_thing \
            else (semantic[ent.enter_frame] == ent.category_id)
        coords = np.argwhere(mask0)
        if coords.size == 0:
            prompt_points[ent.entity_id] = []
            continue
        picks = coords[rng.integers(0, len(coords), size=min(5, len(coords)))]
        prompt_points[ent.entity_id] = [(int(r), int(c)) for r, c in picks]

    gt = GroundTruth(categories=categories, instance_maps=instance,
                     semantic_maps=semantic, panoptic_class=semantic.copy(),
                     panoptic_id=panoptic_id, entities=entities,
                     prompt_points=prompt_points)
    return frames, gt


def sample_scene_specs(seed: int, count: int, frames: int = 8, height: int = 96,
                       width: int = 96, max_shapes: int = 3,
                       kinds: tuple[str, ...] = THING_KINDS) -> list[SceneSpec]:
    """Draw `count` valid random scene specs with distinct per-scene colors."""
    rng = np.random.default_rng([seed, 0x5CE17E])
    colors = list(COLOR_TABLE)
    specs = []
    for i in range(count):
        n_shapes = int(rng.integers(1, max_shapes + 1))
        chosen_colors = rng.choice(len(colors), size=n_shapes, replace=False)
        shapes = []
        for j in range(n_shapes):
            kind = kinds[int(rng.integers(0, len(kinds)))]
            size = float(rng.uniform(16, 24)) if kind != "triangle" else float(rng.uniform(20, 28))
            speed = float(rng.uniform(0.8, 2.5))
            angle = float(rng.uniform(0, 2 * math.pi))
            vel = (speed * math.sin(angle), speed * math.cos(angle))
            margin = size + 2
            lo_r = margin + max(0.0, -vel[0] * (frames - 1))
            hi_r = height - margin - max(0.0, vel[0] * (frames - 1))
            lo_c = margin + max(0.0, -vel[1] * (frames - 1))
            hi_c = width - margin - max(0.0, vel[1] * (frames - 1))
            if lo_r >= hi_r or lo_c >= hi_c:
                vel = (vel[0] * 0.3, vel[1] * 0.3)
                lo_r = margin + max(0.0, -vel[0] * (frames - 1))
                hi_r = height - margin - max(0.0, vel[0] * (frames - 1))
                lo_c = margin + max(0.0, -vel[1] * (frames - 1))
                hi_c = width - margin - max(0.0, vel[1] * (frames - 1))
            start = (float(rng.uniform(lo_r, hi_r)), float(rng.uniform(lo_c, hi_c)))
            shapes.append(ShapeSpec(kind=kind, color=colors[int(chosen_colors[j])],
                                    size=size, start=start, velocity=vel))
        spec = SceneSpec(seed=seed * 1000 + i, frames=frames, height=height,
                         width=width, shapes=shapes)
        spec.validate()  # colors are distinct within a scene, so expressions are unique
        specs.append(spec)
    return specs
