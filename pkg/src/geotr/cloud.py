"""Point clouds, rigid transforms, downsampling and patch grouping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError
from .kdtree import BRUTE_FORCE_BELOW, KDTree, brute_knn, brute_radius


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"point cloud must be (N, 3), got {pts.shape}")
        if len(pts) == 0:
            raise DataError("point cloud is empty")
        if not np.isfinite(pts).all():
            raise DataError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat):
        mat = np.asarray(mat, dtype=np.float64).reshape(4, 4)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
        return cls(rot, translation)

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points) -> np.ndarray:
        return _as_points(points) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol
        )


def apply_transform(pc, transform: RigidTransform) -> PointCloud:
    return PointCloud(transform.apply(pc))


def rotation_angle_deg(r_a, r_b) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


# ---------------------------------------------------------------------------
# downsampling and neighbour search
# ---------------------------------------------------------------------------


def voxel_downsample(pc, voxel: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel key."""
    if not voxel > 0:
        raise ParameterError(f"voxel size must be positive, got {voxel}")
    pts = _as_points(pc)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return PointCloud(sums / counts[:, None])


def knn(query, base, k: int):
    """``k`` nearest base points per query, sorted by distance, ties to lower index."""
    q = _as_points(query)
    b = _as_points(base)
    if not 1 <= k <= len(b):
        raise ParameterError(f"k={k} must be within [1, {len(b)}]")
    if len(b) < BRUTE_FORCE_BELOW:
        return brute_knn(q, b, k)
    return KDTree(b).query(q, k)


def radius_search(query, base, radius: float):
    """CSR ``(offsets, indices, distances)`` of base points strictly within ``radius``."""
    q = _as_points(query)
    b = _as_points(base)
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if len(b) < BRUTE_FORCE_BELOW:
        return brute_radius(q, b, radius)
    return KDTree(b).query_radius(q, radius)


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


@dataclass
class SuperpointGraph:
    """Dense points, superpoints, and the Voronoi patches linking them."""

    dense_points: np.ndarray
    superpoints: np.ndarray
    patch_of: np.ndarray
    patches: list[np.ndarray]
    dense_features: object = None
    superpoint_features: object = None
    meta: dict = field(default_factory=dict)

    @property
    def num_dense(self):
        return len(self.dense_points)

    @property
    def num_super(self):
        return len(self.superpoints)

    def transformed(self, transform: RigidTransform) -> "SuperpointGraph":
        """Same partition with every coordinate moved rigidly.

        Features and cached geometry (descriptors, embeddings) are dropped;
        only the voxel sizes carry over.
        """
        return SuperpointGraph(
            transform.apply(self.dense_points),
            transform.apply(self.superpoints),
            self.patch_of.copy(),
            [p.copy() for p in self.patches],
            meta={k: v for k, v in self.meta.items() if k in ("dense_voxel", "super_voxel")},
        )

    def padded_patches(self, size: int | None = None):
        """``(M, K)`` dense indices padded with ``-1`` plus a validity mask."""
        k = size or max(len(p) for p in self.patches)
        out = np.full((self.num_super, k), -1, dtype=np.int64)
        for i, p in enumerate(self.patches):
            out[i, : min(k, len(p))] = p[:k]
        return out, out >= 0


def group_points(dense, supers) -> SuperpointGraph:
    """Assign every dense point to its nearest superpoint; drop empty patches."""
    d = _as_points(dense)
    s = _as_points(supers)
    nearest, _ = knn(d, s, 1)
    nearest = nearest[:, 0]
    used = np.unique(nearest)
    remap = np.full(len(s), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    patch_of = remap[nearest]
    order = np.argsort(patch_of, kind="stable")
    bounds = np.searchsorted(patch_of[order], np.arange(len(used) + 1))
    patches = [order[bounds[i] : bounds[i + 1]] for i in range(len(used))]
    return SuperpointGraph(d.copy(), s[used].copy(), patch_of, patches)


def build_graph(pc, dense_voxel: float, super_voxel: float) -> SuperpointGraph:
    """Two-level hierarchy from one raw cloud by two voxel sizes."""
    dense = voxel_downsample(pc, dense_voxel)
    supers = voxel_downsample(dense, super_voxel)
    graph = group_points(dense, supers)
    graph.meta.update(dense_voxel=dense_voxel, super_voxel=super_voxel)
    return graph


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def read_xyz(path) -> PointCloud:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise DataError(f"{path}: malformed line {line!r}")
        rows.append([float(x) for x in parts[:3]])
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_xyz(path, pc) -> None:
    pts = _as_points(pc)
    Path(path).write_text("".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> PointCloud:
    """Binary little-endian PLY with x/y/z vertex properties."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n") :]
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataError(f"{path}: list properties on vertices are unsupported")
            props.append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise DataError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: vertex element lacks x/y/z")
    verts = np.frombuffer(body, dtype=np.dtype(props), count=count)
    return PointCloud(np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64))


def write_ply(path, pc) -> None:
    pts = _as_points(pc).astype("<f4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    Path(path).write_bytes(header.encode("ascii") + pts.tobytes())


def read_points(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    return read_xyz(path)


def write_transforms(path, transforms) -> None:
    lines = []
    for t in transforms:
        lines.append(" ".join(repr(float(x)) for x in t.matrix().reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_transforms(path) -> list[RigidTransform]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 16:
            raise DataError(f"{path}: transform line needs 16 values, got {len(vals)}")
        out.append(RigidTransform.from_matrix(vals))
    return out
