"""Synthetic partial-overlap pairs from a built-in shape library.

Each shape is sampled with 2048 surface points and normalised into the unit
sphere. A pair crops two independent half-spaces that each keep a fraction
``p`` of the points, moves the source by a random rigid motion, jitters both
with clipped Gaussian noise and subsamples each side independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, RigidTransform, read_points
from .errors import ConfigError, GenerationError

SHAPE_POINTS = 2048
MAX_RETRIES = 100


@dataclass(frozen=True)
class SynthConfig:
    keep_ratio: float = 0.7
    max_rotation: float = 45.0  # degrees
    translation: float = 0.5
    noise_sigma: float = 0.01
    noise_clip: float = 0.05
    sample_count: int = 717
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise ConfigError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if not 0 <= self.max_rotation <= 180:
            raise ConfigError(f"max_rotation must lie in [0, 180], got {self.max_rotation}")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be positive")


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _ellipsoid(rng, n, radii):
    return _unit_vectors(rng, n) * np.asarray(radii)


def _box_surface(rng, n, half):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _cylinder(rng, n, radius, half_height):
    theta = rng.uniform(0, 2 * math.pi, n)
    z = rng.uniform(-half_height, half_height, n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _place(pts, rot, offset):
    return pts @ np.asarray(rot).T + np.asarray(offset)


def sphere(rng, n=SHAPE_POINTS):
    return _ellipsoid(rng, n, (1.0, 1.0, 1.0))


def box(rng, n=SHAPE_POINTS):
    return _box_surface(rng, n, (1.0, 0.6, 0.35))


def bunny(rng, n=SHAPE_POINTS):
    """Body, head, two ears and a tail; a fixed asymmetric composite."""
    parts = [
        (0.40, _ellipsoid, ((0.55, 0.38, 0.35),), np.eye(3), (0.0, 0.0, 0.0)),
        (0.20, _ellipsoid, ((0.25, 0.22, 0.22),), np.eye(3), (0.55, 0.05, 0.25)),
        (0.12, _ellipsoid, ((0.06, 0.04, 0.22),), RigidTransform.from_axis_angle((1, 0, 0), 0.3).rotation, (0.6, 0.12, 0.55)),
        (0.12, _ellipsoid, ((0.06, 0.04, 0.18),), RigidTransform.from_axis_angle((1, 1, 0), -0.5).rotation, (0.5, -0.08, 0.52)),
        (0.08, _ellipsoid, ((0.1, 0.1, 0.1),), np.eye(3), (-0.58, 0.0, 0.08)),
        (0.08, _box_surface, ((0.3, 0.25, 0.03),), np.eye(3), (0.05, 0.0, -0.36)),
    ]
    counts = rng.multinomial(n, [p[0] for p in parts])
    return np.concatenate([_place(fn(rng, c, *args), rot, off) for (_, fn, args, rot, off), c in zip(parts, counts)])


def room(rng, n=SHAPE_POINTS):
    """Floor, three walls and two pieces of furniture."""
    w, d, h = 2.0, 1.6, 1.0

    def plane(c, origin, u, v):
        a = rng.uniform(0, 1, (c, 1))
        b = rng.uniform(0, 1, (c, 1))
        return np.asarray(origin) + a * np.asarray(u) + b * np.asarray(v)

    parts = [
        (0.30, lambda c: plane(c, (0, 0, 0), (w, 0, 0), (0, d, 0))),
        (0.18, lambda c: plane(c, (0, 0, 0), (w, 0, 0), (0, 0, h))),
        (0.15, lambda c: plane(c, (0, 0, 0), (0, d, 0), (0, 0, h))),
        (0.15, lambda c: plane(c, (w, 0, 0), (0, d, 0), (0, 0, h))),
        (0.12, lambda c: _box_surface(rng, c, (0.3, 0.2, 0.2)) + (0.5, 0.5, 0.2)),
        (0.10, lambda c: _cylinder(rng, c, 0.15, 0.3) + (1.4, 1.0, 0.3)),
    ]
    counts = rng.multinomial(n, [p[0] for p in parts])
    return np.concatenate([fn(c) for (_, fn), c in zip(parts, counts)])


def composite(rng, n=SHAPE_POINTS):
    """Random union of 3-6 ellipsoids, boxes and cylinders."""
    k = int(rng.integers(3, 7))
    weights = rng.uniform(0.5, 1.5, k)
    counts = rng.multinomial(n, weights / weights.sum())
    pieces = []
    for c in counts:
        kind = rng.integers(3)
        if kind == 0:
            pts = _ellipsoid(rng, c, rng.uniform(0.1, 0.6, 3))
        elif kind == 1:
            pts = _box_surface(rng, c, rng.uniform(0.1, 0.5, 3))
        else:
            pts = _cylinder(rng, c, rng.uniform(0.08, 0.3), rng.uniform(0.15, 0.5))
        pieces.append(_place(pts, _random_rotation(rng), rng.uniform(-0.5, 0.5, 3)))
    return np.concatenate(pieces)


SHAPES = {"sphere": sphere, "box": box, "bunny": bunny, "room": room, "composite": composite}


def normalize_unit_sphere(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    return centred / np.linalg.norm(centred, axis=1).max()


def builtin_shape(name: str, seed: int = 0, n: int = SHAPE_POINTS) -> PointCloud:
    if name not in SHAPES:
        raise ConfigError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    rng = np.random.default_rng(seed)
    return PointCloud(normalize_unit_sphere(SHAPES[name](rng, n)))


def dataset_shapes(directory) -> list[PointCloud]:
    """Every .xyz / .ply file in ``directory``, sorted by name."""
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".xyz", ".ply"))
    return [read_points(p) for p in paths]


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------


@dataclass
class SynthPair:
    p: PointCloud
    q: PointCloud
    t_gt: RigidTransform  # maps P onto Q
    clean: np.ndarray  # complete noiseless shape in Q's frame


def crop_half_space(points, keep_ratio: float, rng) -> np.ndarray:
    """Keep the ``keep_ratio`` fraction of points furthest along a random direction."""
    if keep_ratio >= 1.0:
        return np.asarray(points)
    for _ in range(MAX_RETRIES):
        direction = _unit_vectors(rng, 1)[0]
        proj = points @ direction
        cut = np.percentile(proj, 100.0 * (1.0 - keep_ratio))
        kept = points[proj > cut]
        if len(kept) >= 3:
            return kept
    raise GenerationError(f"crop keeping {keep_ratio} left fewer than 3 points after {MAX_RETRIES} tries")


def random_motion(rng, max_rotation_deg: float, translation: float) -> RigidTransform:
    axis = _unit_vectors(rng, 1)[0]
    angle = math.radians(rng.uniform(0.0, max_rotation_deg))
    t = rng.uniform(-translation, translation, 3)
    return RigidTransform.from_axis_angle(axis, angle, t)


def _jitter(points, cfg: SynthConfig, rng):
    if not cfg.noise:
        return points
    noise = np.clip(rng.normal(0.0, cfg.noise_sigma, points.shape), -cfg.noise_clip, cfg.noise_clip)
    return points + noise


def _subsample(points, count, rng):
    if len(points) <= count:
        return points[rng.permutation(len(points))]
    return points[rng.choice(len(points), count, replace=False)]


def make_pair(shape, cfg: SynthConfig = SynthConfig()) -> SynthPair:
    """Partial, noisy, rigidly displaced pair from one shape; reproducible by seed."""
    rng = np.random.default_rng(cfg.seed)
    clean = normalize_unit_sphere(getattr(shape, "points", shape))
    src = crop_half_space(clean, cfg.keep_ratio, rng)
    ref = crop_half_space(clean, cfg.keep_ratio, rng)
    motion = random_motion(rng, cfg.max_rotation, cfg.translation)
    src = motion.apply(src)
    src = _subsample(_jitter(src, cfg, rng), cfg.sample_count, rng)
    ref = _subsample(_jitter(ref, cfg, rng), cfg.sample_count, rng)
    return SynthPair(PointCloud(src), PointCloud(ref), motion.inverse(), clean)


def make_pairs(count: int, cfg: SynthConfig = SynthConfig(), shape: str = "composite") -> list[SynthPair]:
    """``count`` pairs; pair ``i`` uses seed ``cfg.seed + i`` for both shape and pair."""
    out = []
    for i in range(count):
        seed = cfg.seed + i
        base = builtin_shape(shape, seed)
        out.append(make_pair(base, SynthConfig(**{**cfg.__dict__, "seed": seed})))
    return out
