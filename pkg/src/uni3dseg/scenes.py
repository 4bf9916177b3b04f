"""Point clouds, superpoint pooling, synthetic scene generation, augmentation.

A scene is an N x 6 cloud (xyz in meters, rgb in [0, 1]) with per-point class
labels and instance ids (0 marks stuff). Superpoints are voxel cells: mean
features, majority labels, and a point-to-cell assignment map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .containers import read_container, write_container


class SceneError(ValueError):
    """Invalid scene data or generation parameters."""


@dataclass
class ClassCatalog:
    """Class vocabulary with the thing (countable) / stuff (amorphous) split."""

    names: list[str]
    is_thing: list[bool]

    def __post_init__(self):
        if len(self.names) == 0:
            raise SceneError("catalog must define at least one class")
        if len(self.names) != len(self.is_thing):
            raise SceneError("catalog names and is_thing lengths differ")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def thing_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.is_thing) if t]

    @property
    def stuff_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.is_thing) if not t]

    def to_json(self) -> dict:
        return {"names": list(self.names), "is_thing": list(self.is_thing)}

    @classmethod
    def from_json(cls, doc: dict) -> "ClassCatalog":
        return cls(names=list(doc["names"]), is_thing=[bool(b) for b in doc["is_thing"]])

    @classmethod
    def load(cls, path) -> "ClassCatalog":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


@dataclass
class PointCloud:
    points: np.ndarray         # (N, 6) float64: x, y, z, r, g, b
    class_labels: np.ndarray   # (N,) int
    instance_ids: np.ndarray   # (N,) int, 0 = stuff

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self, catalog: ClassCatalog | None = None) -> None:
        pts = self.points
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 1:
            raise SceneError(f"points must be (N>=1, 6), got {pts.shape}")
        if not np.all(np.isfinite(pts[:, :3])):
            raise SceneError("non-finite coordinates")
        colors = pts[:, 3:]
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise SceneError("colors must lie in [0, 1]")
        n = pts.shape[0]
        if self.class_labels.shape != (n,) or self.instance_ids.shape != (n,):
            raise SceneError("label arrays must match point count")
        if catalog is not None:
            if self.class_labels.min() < 0 or self.class_labels.max() >= catalog.num_classes:
                raise SceneError("class label out of catalog range")
            thing = np.asarray(catalog.is_thing)[self.class_labels]
            if np.any(thing & (self.instance_ids < 1)):
                raise SceneError("thing-class point without an instance id")
            if np.any(~thing & (self.instance_ids != 0)):
                raise SceneError("stuff-class point with a nonzero instance id")


@dataclass
class SuperpointScene:
    features_in: np.ndarray    # (M, 6) per-cell mean point attributes
    assignment: np.ndarray     # (N,) point -> superpoint
    class_labels: np.ndarray   # (M,) majority class per cell
    instance_ids: np.ndarray   # (M,) majority instance per cell

    @property
    def num_superpoints(self) -> int:
        return self.features_in.shape[0]


def _majority_per_cell(inverse: np.ndarray, labels: np.ndarray, m: int) -> np.ndarray:
    """Most frequent label per cell; ties break to the lowest label id."""
    labels = np.asarray(labels, dtype=np.int64)
    width = int(labels.max()) + 1 if labels.size else 1
    keys, counts = np.unique(inverse.astype(np.int64) * width + labels, return_counts=True)
    cells = keys // width
    labs = keys % width
    order = np.lexsort((labs, -counts, cells))
    cells, labs = cells[order], labs[order]
    _, first = np.unique(cells, return_index=True)
    out = np.zeros(m, dtype=np.int64)
    out[cells[first]] = labs[first]
    return out


def voxelize(pc: PointCloud, voxel_size: float) -> SuperpointScene:
    """Pool points into voxel-cell superpoints.

    Cells are ``floor(coord / voxel_size)`` triples ordered lexicographically;
    features are per-cell means, labels per-cell majorities.
    """
    if voxel_size <= 0:
        raise SceneError(f"voxel_size must be positive, got {voxel_size}")
    cells = np.floor(pc.points[:, :3] / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    m = counts.shape[0]
    feats = np.zeros((m, 6), dtype=np.float64)
    np.add.at(feats, inverse, pc.points)
    feats /= counts[:, None]
    return SuperpointScene(
        features_in=feats,
        assignment=inverse.astype(np.int64),
        class_labels=_majority_per_cell(inverse, pc.class_labels, m),
        instance_ids=_majority_per_cell(inverse, pc.instance_ids, m),
    )


def unpool(values: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Broadcast per-superpoint rows back to points: out[i] = values[assignment[i]]."""
    assignment = np.asarray(assignment)
    if assignment.size and (assignment.min() < 0 or assignment.max() >= values.shape[0]):
        raise SceneError("assignment index out of range")
    return values[assignment]


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------

@dataclass
class ThingShape:
    shape: str                   # box | cylinder | sphere
    color: tuple[float, float, float]
    size: tuple[float, float]    # min/max characteristic extent in meters
    aspect_z: float = 1.0        # height multiplier relative to footprint


@dataclass
class SceneSpec:
    """Parameters of the synthetic room generator."""

    extent: tuple[float, float, float]
    catalog: ClassCatalog
    floor_points: int = 400
    wall_points: int = 45
    object_count: tuple[int, int] = (2, 5)
    points_per_object: int = 110
    color_noise: float = 0.04
    instance_color_jitter: float = 0.08  # per-object shift around the class color
    clearance: float = 0.35          # wall and object points start this high
    min_separation: float = 0.35     # gap kept between object footprints
    wall_band: float = 0.6           # vertical span of wall points above clearance
    stuff_colors: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    things: dict[str, ThingShape] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise SceneError("room extent must be positive in every axis")
        if not self.catalog.stuff_ids:
            raise SceneError("generator needs at least one stuff class")
        for name in self.catalog.names:
            if self.catalog.is_thing[self.catalog.names.index(name)] and name not in self.things:
                raise SceneError(f"thing class {name!r} has no shape definition")

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        catalog = ClassCatalog.from_json(doc["catalog"])
        things = {
            name: ThingShape(
                shape=td["shape"],
                color=tuple(td["color"]),
                size=tuple(td["size"]),
                aspect_z=float(td.get("aspect_z", 1.0)),
            )
            for name, td in doc.get("things", {}).items()
        }
        return cls(
            extent=tuple(doc["extent"]),
            catalog=catalog,
            floor_points=int(doc.get("floor_points", 400)),
            wall_points=int(doc.get("wall_points", 45)),
            object_count=tuple(doc.get("object_count", (2, 5))),
            points_per_object=int(doc.get("points_per_object", 110)),
            color_noise=float(doc.get("color_noise", 0.04)),
            instance_color_jitter=float(doc.get("instance_color_jitter", 0.08)),
            clearance=float(doc.get("clearance", 0.35)),
            min_separation=float(doc.get("min_separation", 0.35)),
            wall_band=float(doc.get("wall_band", 0.6)),
            stuff_colors={k: tuple(v) for k, v in doc.get("stuff_colors", {}).items()},
            things=things,
        )

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


def _noisy_color(base, n, noise, rng):
    c = np.tile(np.asarray(base, dtype=np.float64), (n, 1))
    if noise > 0:
        c = c + rng.normal(0.0, noise, size=c.shape)
    return np.clip(c, 0.0, 1.0)


def _box_surface(n, half, rng):
    """Uniform samples on the surface of an axis-aligned box (area-weighted)."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=n)
    v = rng.uniform(-1, 1, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        sel = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        p = np.empty((sel.sum(), 3))
        p[:, axis] = sign * half[axis]
        others = [a for a in range(3) if a != axis]
        p[:, others[0]] = u[sel] * half[others[0]]
        p[:, others[1]] = v[sel] * half[others[1]]
        pts[sel] = p
    return pts


def _cylinder_surface(n, radius, height, rng):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    on_side = rng.uniform(size=n) < lateral / (lateral + cap)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    side = on_side
    pts[side, 0] = radius * np.cos(theta[side])
    pts[side, 1] = radius * np.sin(theta[side])
    pts[side, 2] = rng.uniform(0, height, size=side.sum())
    top = ~on_side
    r = radius * np.sqrt(rng.uniform(size=top.sum()))
    pts[top, 0] = r * np.cos(theta[top])
    pts[top, 1] = r * np.sin(theta[top])
    pts[top, 2] = height
    return pts


def _sphere_surface(n, radius, rng):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def generate_scene(spec: SceneSpec, seed: int) -> PointCloud:
    """Generate a deterministic synthetic room scene.

    Floor and wall points carry the first and second stuff classes; objects
    are surface-sampled primitives with class-correlated colors and instance
    ids 1..n in generation order.
    """
    rng = np.random.default_rng(seed)
    ex, ey, ez = spec.extent
    catalog = spec.catalog
    stuff = catalog.stuff_ids
    floor_cls = stuff[0]
    wall_cls = stuff[1] if len(stuff) > 1 else stuff[0]

    chunks, labels, instances = [], [], []

    def add(points, colors, cls, inst):
        n = points.shape[0]
        chunks.append(np.hstack([points, colors]))
        labels.append(np.full(n, cls, dtype=np.int64))
        instances.append(np.full(n, inst, dtype=np.int64))

    floor_color = spec.stuff_colors.get(catalog.names[floor_cls], (0.45, 0.42, 0.40))
    wall_color = spec.stuff_colors.get(catalog.names[wall_cls], (0.80, 0.80, 0.74))

    fp = np.column_stack([
        rng.uniform(0, ex, spec.floor_points),
        rng.uniform(0, ey, spec.floor_points),
        np.abs(rng.normal(0, 0.01, spec.floor_points)),
    ])
    add(fp, _noisy_color(floor_color, spec.floor_points, spec.color_noise, rng), floor_cls, 0)

    for wall in range(4):
        wn = spec.wall_points
        a = rng.uniform(0, ex if wall < 2 else ey, wn)
        z_top = min(ez, spec.clearance + spec.wall_band)
        z = rng.uniform(spec.clearance, z_top, wn)
        jitter = np.abs(rng.normal(0, 0.01, wn))
        if wall == 0:
            w = np.column_stack([a, jitter, z])
        elif wall == 1:
            w = np.column_stack([a, ey - jitter, z])
        elif wall == 2:
            w = np.column_stack([jitter, a, z])
        else:
            w = np.column_stack([ex - jitter, a, z])
        add(w, _noisy_color(wall_color, wn, spec.color_noise, rng), wall_cls, 0)

    thing_names = [catalog.names[i] for i in catalog.thing_ids]
    lo, hi = spec.object_count
    n_objects = int(rng.integers(lo, hi + 1))
    placed: list[tuple[float, float, float]] = []  # (cx, cy, footprint radius)
    for obj in range(n_objects):
        cls_name = thing_names[int(rng.integers(len(thing_names)))] if thing_names else None
        if cls_name is None:
            break
        cls = catalog.names.index(cls_name)
        shape = spec.things[cls_name]
        size = float(rng.uniform(*shape.size))
        radius = size / 2
        margin = radius + spec.min_separation
        cx = cy = None
        for _ in range(200):
            tx = rng.uniform(margin, ex - margin)
            ty = rng.uniform(margin, ey - margin)
            if all(np.hypot(tx - px, ty - py) >= radius + pr + spec.min_separation
                   for px, py, pr in placed):
                cx, cy = tx, ty
                break
        if cx is None:  # crowded room: place anyway rather than fail
            cx = rng.uniform(margin, ex - margin)
            cy = rng.uniform(margin, ey - margin)
        placed.append((cx, cy, radius))
        z0 = spec.clearance
        npts = spec.points_per_object
        if shape.shape == "box":
            half = np.array([radius, radius, size * shape.aspect_z / 2])
            pts = _box_surface(npts, half, rng) + np.array([cx, cy, z0 + half[2]])
        elif shape.shape == "cylinder":
            height = size * shape.aspect_z
            pts = _cylinder_surface(npts, radius, height, rng) + np.array([cx, cy, z0])
        elif shape.shape == "sphere":
            pts = _sphere_surface(npts, radius, rng) + np.array([cx, cy, z0 + radius])
        else:
            raise SceneError(f"unknown shape {shape.shape!r} for class {cls_name!r}")
        base_color = np.asarray(shape.color) + rng.uniform(
            -spec.instance_color_jitter, spec.instance_color_jitter, 3)
        add(pts, _noisy_color(base_color, npts, spec.color_noise, rng), cls, obj + 1)

    pc = PointCloud(
        points=np.vstack(chunks),
        class_labels=np.concatenate(labels),
        instance_ids=np.concatenate(instances),
    )
    pc.validate(catalog)
    return pc


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_max: float = np.pi          # radians, rotation about z in [-max, max]
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise SceneError("flip_prob must lie in [0, 1]")
        if self.rotation_max < 0:
            raise SceneError("rotation_max must be nonnegative")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise SceneError(f"invalid scale range {self.scale_range}")


def augment(pc: PointCloud, cfg: AugmentConfig, seed: int, center=None) -> PointCloud:
    """Flip/rotate/scale geometry about the scene center; labels untouched."""
    rng = np.random.default_rng(seed)
    coords = pc.points[:, :3].copy()
    if center is None:
        cx = (coords[:, 0].min() + coords[:, 0].max()) / 2.0
        cy = (coords[:, 1].min() + coords[:, 1].max()) / 2.0
    else:
        cx, cy = center

    do_flip = rng.uniform() < cfg.flip_prob
    angle = rng.uniform(-cfg.rotation_max, cfg.rotation_max) if cfg.rotation_max > 0 else 0.0
    lo, hi = cfg.scale_range
    s = rng.uniform(lo, hi) if hi > lo else lo

    if do_flip:
        coords[:, 0] = 2.0 * cx - coords[:, 0]
    if angle != 0.0:
        ca, sa = np.cos(angle), np.sin(angle)
        x = coords[:, 0] - cx
        y = coords[:, 1] - cy
        coords[:, 0] = ca * x - sa * y + cx
        coords[:, 1] = sa * x + ca * y + cy
    if s != 1.0:
        coords[:, 0] = (coords[:, 0] - cx) * s + cx
        coords[:, 1] = (coords[:, 1] - cy) * s + cy
        coords[:, 2] = coords[:, 2] * s

    points = pc.points.copy()
    points[:, :3] = coords
    return PointCloud(points=points, class_labels=pc.class_labels.copy(),
                      instance_ids=pc.instance_ids.copy())


# ---------------------------------------------------------------------------
# scene file I/O
# ---------------------------------------------------------------------------

def save_scene(path, pc: PointCloud) -> None:
    write_container(path, {
        "points": pc.points.astype("<f8"),
        "class_labels": pc.class_labels.astype("<u4"),
        "instance_ids": pc.instance_ids.astype("<u4"),
    })


def load_scene(path) -> PointCloud:
    entries = read_container(path)
    try:
        return PointCloud(
            points=entries["points"].astype(np.float64),
            class_labels=entries["class_labels"].astype(np.int64),
            instance_ids=entries["instance_ids"].astype(np.int64),
        )
    except KeyError as missing:
        raise SceneError(f"{path}: scene container missing entry {missing}") from None
