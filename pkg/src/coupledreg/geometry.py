"""Point clouds, rigid transforms, spatial queries and pose-error metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class InvalidTransformError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points; point ``i`` is ``points[i]``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, idx) -> PointCloud:
        return PointCloud(self.points[np.asarray(idx, dtype=np.intp)])


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidTransformError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InvalidTransformError("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> RigidTransform:
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4) or not np.allclose(T[3], [0, 0, 0, 1]):
            raise InvalidTransformError("expected a homogeneous 4x4 matrix")
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def compose(self, first: RigidTransform) -> RigidTransform:
        """Return ``self ∘ first`` (apply ``first``, then ``self``)."""
        return RigidTransform(self.rotation @ first.rotation,
                              self.rotation @ first.translation + self.translation)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix; ``angle`` in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    # re-orthonormalize so the SO(3) check holds to 1e-9 at any angle
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def random_rotation(rng: np.random.Generator, max_degrees: float = 180.0) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0.0, max_degrees))
    return rotation_about_axis(axis, angle)


def apply_transform(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    if not isinstance(tf, RigidTransform):
        tf = RigidTransform(*tf)
    return PointCloud(tf.apply(as_points(cloud)))


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: float
    cells: np.ndarray        # (n_cells, 3) integer cell indices, canonical order
    assignment: np.ndarray   # point -> row of ``cells``

    def members(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cell)


def voxel_grid(cloud, voxel_size: float) -> VoxelGrid:
    pts = as_points(cloud)
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(pts) == 0:
        raise EmptyInputError("cannot voxelize an empty cloud")
    keys = np.floor(pts / voxel_size).astype(np.int64)
    # canonical order: sort cells by (z, y, x)
    cells, inverse = np.unique(keys[:, ::-1], axis=0, return_inverse=True)
    return VoxelGrid(float(voxel_size), cells[:, ::-1], inverse.reshape(-1))


def voxel_downsample(cloud, voxel_size: float) -> tuple[PointCloud, np.ndarray]:
    """Replace the points of every occupied voxel by their centroid.

    Returns the centroid cloud (cells sorted by z, then y, then x) and the
    point-to-centroid assignment.
    """
    grid = voxel_grid(cloud, voxel_size)
    pts = as_points(cloud)
    n_cells = len(grid.cells)
    counts = np.bincount(grid.assignment, minlength=n_cells).astype(np.float64)
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, grid.assignment, pts)
    return PointCloud(sums / counts[:, None]), grid.assignment


_BRUTE_FORCE_BELOW = 256


def nearest_neighbors(queries, cloud) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised nearest neighbour; ties resolve to the lowest index."""
    q = as_points(queries)
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyInputError("cloud must be non-empty")
    if len(q) == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0)
    if len(pts) < _BRUTE_FORCE_BELOW:
        d = np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=-1)
        idx = np.argmin(d, axis=1)  # argmin returns the first minimum
        return idx, d[np.arange(len(q)), idx]
    k = min(4, len(pts))
    dist, idx = cKDTree(pts).query(q, k=k)
    # among equidistant candidates prefer the lowest index
    tied = dist <= dist[:, :1]
    idx_masked = np.where(tied, idx, np.iinfo(np.intp).max)
    best = np.min(idx_masked, axis=1)
    return best.astype(np.intp), dist[:, 0]


def nearest_neighbor(query, cloud) -> tuple[int, float]:
    idx, dist = nearest_neighbors(np.asarray(query, dtype=np.float64).reshape(1, 3), cloud)
    return int(idx[0]), float(dist[0])


def radius_neighbors(cloud, radius: float) -> list[np.ndarray]:
    """Indices of all points within ``radius`` of each point (self included)."""
    pts = as_points(cloud)
    tree = cKDTree(pts)
    return [np.asarray(sorted(n), dtype=np.intp) for n in tree.query_ball_point(pts, radius)]


def pose_error(est: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """Relative rotation error in degrees and relative translation error."""
    cos = (np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0
    rre = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    rte = np.linalg.norm(est.translation - gt.translation)
    return float(rre), float(rte)


def rmse_under_transform(src, tgt, gt_pairs, est: RigidTransform) -> float:
    """Root-mean-square residual of ``est`` over ground-truth pairs ``(i, j)``."""
    pairs = np.asarray(gt_pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyInputError("ground-truth pair list is empty")
    p = as_points(src)[pairs[:, 0]]
    q = as_points(tgt)[pairs[:, 1]]
    res = np.linalg.norm(est.apply(p) - q, axis=1)
    return float(np.sqrt(np.mean(res ** 2)))


# --- file formats -----------------------------------------------------------

def read_points(path) -> PointCloud:
    """Read a whitespace-separated xyz text file or an ASCII PLY."""
    path = Path(path)
    text = path.read_text()
    if text.startswith("ply"):
        return _read_ascii_ply(text, path)
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 3:
            raise ValueError(f"{path}: expected 3 values per line, got {len(vals)}")
        rows.append([float(v) for v in vals])
    return PointCloud(np.array(rows).reshape(-1, 3))


def _read_ascii_ply(text: str, path) -> PointCloud:
    lines = text.splitlines()
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    header_end = None
    for i, line in enumerate(lines):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None or n_vertex is None:
        raise ValueError(f"{path}: malformed PLY header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ValueError(f"{path}: PLY vertex lacks x/y/z properties") from None
    body = lines[header_end + 1: header_end + 1 + n_vertex]
    data = np.array([[float(v) for v in ln.split()] for ln in body]).reshape(-1, len(props))
    return PointCloud(data[:, cols])


def write_points(path, cloud) -> None:
    np.savetxt(path, as_points(cloud), fmt="%.17g")


def read_transform(path) -> RigidTransform:
    T = np.loadtxt(path, dtype=np.float64)
    return RigidTransform.from_matrix(T)


def write_transform(path, tf: RigidTransform) -> None:
    np.savetxt(path, tf.matrix(), fmt="%.17g")
