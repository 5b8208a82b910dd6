"""Synthetic partial-overlap scene pairs with known ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import PointCloud, RigidTransform, as_points, nearest_neighbors, rotation_about_axis


class GenerationError(RuntimeError):
    pass


BASES = ("room", "boxes", "twin_cubes")


@dataclass(frozen=True)
class SynthConfig:
    n_points: int = 5000
    overlap_fraction: float = 0.5
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    density_skew: float = 1.0
    rotation_magnitude: float = 60.0     # degrees
    translation_magnitude: float = 0.5
    seed: int = 0
    base: str = "room"
    base_seed: int | None = None         # scene layout; defaults to ``seed``
    r_o: float = 0.0375
    r_p: float = 0.0375
    r_n: float = 0.1

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("n_points must be at least 3")
        if not 0.0 < self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.density_skew < 1.0:
            raise ValueError("density_skew must be >= 1")
        if self.base not in BASES:
            raise ValueError(f"unknown base {self.base!r}; choose from {BASES}")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- surface primitives -------------------------------------------------------
# Each sampler returns ``n`` points on the surface, area-uniform.

def _sample_rect(rng, n, origin, u, v):
    s = rng.uniform(size=(n, 2))
    return origin + s[:, :1] * u + s[:, 1:] * v


def _box_faces(center, size):
    c = np.asarray(center, float)
    h = np.asarray(size, float) / 2
    faces = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        for sign in (-1.0, 1.0):
            o = c.copy()
            o[axis] += sign * h[axis]
            o[a] -= h[a]
            o[b] -= h[b]
            u = np.zeros(3)
            u[a] = 2 * h[a]
            v = np.zeros(3)
            v[b] = 2 * h[b]
            n = np.zeros(3)
            n[axis] = sign
            faces.append((o, u, v, n))
    return faces


def _bumpy(rng, pts, normal, amp, freq, phase):
    if amp == 0.0:
        return pts
    w = np.sin(freq * pts @ np.array([1.0, 0.7, 0.3]) + phase) * np.cos(freq * pts @ np.array([-0.4, 1.0, 0.8]))
    return pts + amp * w[:, None] * normal


class _Scene:
    def __init__(self):
        self.parts = []  # (area, sampler)

    def add_rect(self, origin, u, v, normal=None, bump=(0.0, 0.0, 0.0)):
        area = np.linalg.norm(np.cross(u, v))
        n = np.cross(u, v) / area if normal is None else np.asarray(normal, float)

        def sample(rng, k, origin=np.asarray(origin, float), u=np.asarray(u, float), v=np.asarray(v, float)):
            return _bumpy(rng, _sample_rect(rng, k, origin, u, v), n, *bump)
        self.parts.append((area, sample))

    def add_box(self, center, size, bump=(0.0, 0.0, 0.0), skip_bottom=True):
        for o, u, v, n in _box_faces(center, size):
            if skip_bottom and n[2] < 0:
                continue
            self.add_rect(o, u, v, n, bump)

    def add_sphere(self, center, radius):
        def sample(rng, k):
            d = rng.normal(size=(k, 3))
            return np.asarray(center) + radius * d / np.linalg.norm(d, axis=1, keepdims=True)
        self.parts.append((4 * np.pi * radius ** 2, sample))

    def add_cylinder(self, base, radius, height):
        def sample(rng, k):
            th = rng.uniform(0, 2 * np.pi, k)
            z = rng.uniform(0, height, k)
            return np.asarray(base) + np.stack([radius * np.cos(th), radius * np.sin(th), z], axis=1)
        self.parts.append((2 * np.pi * radius * height, sample))

    def sample(self, rng, n):
        areas = np.array([a for a, _ in self.parts])
        counts = rng.multinomial(n, areas / areas.sum())
        pts = np.concatenate([s(rng, k) for (_, s), k in zip(self.parts, counts) if k > 0])
        return pts[rng.permutation(len(pts))]


def _room(rng) -> _Scene:
    sc = _Scene()
    L, W, H = rng.uniform(3.0, 4.0), rng.uniform(2.5, 3.5), rng.uniform(1.2, 1.6)
    sc.add_rect([0, 0, 0], [L, 0, 0], [0, W, 0], [0, 0, 1])
    sc.add_rect([0, 0, 0], [L, 0, 0], [0, 0, H], [0, 1, 0])
    sc.add_rect([0, 0, 0], [0, W, 0], [0, 0, H], [1, 0, 0])
    sc.add_rect([L, 0, 0], [0, W * 0.6, 0], [0, 0, H], [-1, 0, 0])
    for _ in range(rng.integers(3, 6)):
        size = rng.uniform([0.3, 0.3, 0.2], [0.9, 0.8, 0.9])
        c = [rng.uniform(0.5, L - 0.5), rng.uniform(0.5, W - 0.5), size[2] / 2]
        sc.add_box(c, size)
    sc.add_sphere([rng.uniform(0.5, L - 0.5), rng.uniform(0.5, W - 0.5), 0.35], rng.uniform(0.2, 0.35))
    sc.add_cylinder([rng.uniform(0.5, L - 0.5), rng.uniform(0.5, W - 0.5), 0.0], rng.uniform(0.1, 0.25),
                    rng.uniform(0.5, 1.1))
    return sc


def _boxes(rng) -> _Scene:
    sc = _Scene()
    L = W = 3.0
    sc.add_rect([0, 0, 0], [L, 0, 0], [0, W, 0], [0, 0, 1], bump=(0.03, 6.0, rng.uniform(0, 6)))
    for _ in range(rng.integers(4, 7)):
        size = rng.uniform([0.3, 0.3, 0.3], [0.8, 0.8, 1.0])
        c = [rng.uniform(0.4, L - 0.4), rng.uniform(0.4, W - 0.4), size[2] / 2]
        sc.add_box(c, size, bump=(rng.uniform(0.01, 0.04), rng.uniform(8, 20), rng.uniform(0, 6)))
    return sc


def _twin_cubes(rng) -> _Scene:
    sc = _Scene()
    L, W = 3.0, 2.0
    sc.add_rect([0, 0, 0], [L, 0, 0], [0, W, 0], [0, 0, 1])
    s = rng.uniform(0.5, 0.7)
    for x in (0.8, 2.2):
        sc.add_box([x, 1.0, s / 2], [s, s, s])
    # one asymmetric landmark so the layout itself is not mirror symmetric
    sc.add_cylinder([rng.uniform(0.3, 2.7), rng.uniform(1.6, 1.8), 0.0], 0.12, 0.6)
    return sc


_BUILDERS = {"room": _room, "boxes": _boxes, "twin_cubes": _twin_cubes}


def make_base(kind: str, n_points: int, seed: int) -> PointCloud:
    """Sample a built-in scene and normalize it to unit bounding diagonal, centred at 0."""
    rng = np.random.default_rng([seed, 7919])
    scene = _BUILDERS[kind](rng)
    pts = scene.sample(rng, n_points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pts = (pts - (lo + hi) / 2) / np.linalg.norm(hi - lo)
    return PointCloud(pts)


# --- pair construction ----------------------------------------------------------

@dataclass(frozen=True)
class SynthPair:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform           # maps source into the target frame
    gt_pairs: np.ndarray         # (K, 2) source/target indices
    overlap: float               # measured on the clean crops


def mutual_pairs_within(src, tgt, gt: RigidTransform, radius: float) -> np.ndarray:
    """Mutual nearest neighbours closer than ``radius`` after aligning ``src``."""
    aligned = gt.apply(as_points(src))
    fwd, d = nearest_neighbors(aligned, tgt)
    bwd, _ = nearest_neighbors(as_points(tgt), aligned)
    i = np.flatnonzero((bwd[fwd] == np.arange(len(fwd))) & (d < radius))
    return np.stack([i, fwd[i]], axis=1).astype(np.intp)


def measured_overlap(src, tgt, gt: RigidTransform, radius: float) -> float:
    _, d = nearest_neighbors(gt.apply(as_points(src)), tgt)
    return float(np.mean(d < radius))


def _skew_keep(rng, pts, skew):
    if skew == 1.0:
        return np.ones(len(pts), dtype=bool)
    d = rng.normal(size=3)
    t = pts @ (d / np.linalg.norm(d))
    t = (t - t.min()) / max(np.ptp(t), 1e-12)
    keep_prob = 1.0 - t * (1.0 - 1.0 / skew)
    return rng.uniform(size=len(pts)) < keep_prob


def generate_pair(cfg: SynthConfig, base: PointCloud | None = None) -> SynthPair:
    """Crop two overlapping views of a scene and move the source rigidly.

    The base is split along a random direction into a lower slab (source)
    and an upper slab (target) whose shared band holds ``overlap_fraction``
    of each view; shared points are identical before noise is added.
    """
    rng = np.random.default_rng(cfg.seed)
    alpha = 1.0 / (2.0 - cfg.overlap_fraction)
    n_base = int(np.ceil(cfg.n_points / alpha))
    if base is None:
        base = make_base(cfg.base, n_base, cfg.seed if cfg.base_seed is None else cfg.base_seed)
    pts = as_points(base)

    identity = RigidTransform.identity()
    n = len(pts)
    for _attempt in range(100):
        d = rng.normal(size=3)
        order = np.argsort(pts @ (d / np.linalg.norm(d)), kind="stable")
        keep_src = _skew_keep(rng, pts, cfg.density_skew)
        keep_tgt = _skew_keep(rng, pts, cfg.density_skew)

        def crop(k):
            s_idx = np.sort(order[:k])
            t_idx = np.sort(order[n - k:])
            return s_idx[keep_src[s_idx]], t_idx[keep_tgt[t_idx]]

        def overlap_at(k):
            s_idx, t_idx = crop(k)
            return measured_overlap(pts[s_idx], pts[t_idx], identity, cfg.r_o)

        # points near the band edge see a neighbour across it, so the measured
        # overlap exceeds the nominal one; bisect the slab size to compensate
        lo, hi = (n + 1) // 2, n
        k = int(round(alpha * n))
        ov = overlap_at(k)
        while hi - lo > 1 and abs(ov - cfg.overlap_fraction) > 0.01:
            if ov > cfg.overlap_fraction:
                hi = k
            else:
                lo = k
            k = (lo + hi) // 2
            ov = overlap_at(k)
        if abs(ov - cfg.overlap_fraction) <= 0.05:
            src_idx, tgt_idx = crop(k)
            P, Q, overlap = pts[src_idx], pts[tgt_idx], ov
            break
    else:
        raise GenerationError(f"could not reach overlap {cfg.overlap_fraction} within 100 crops")

    P = P[rng.permutation(len(P))]
    Q = Q[rng.permutation(len(Q))]
    if cfg.noise_sigma > 0:
        P = P + rng.normal(scale=cfg.noise_sigma, size=P.shape)
        Q = Q + rng.normal(scale=cfg.noise_sigma, size=Q.shape)
    if cfg.outlier_fraction > 0:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        n_out = int(round(cfg.outlier_fraction * len(P)))
        P = np.vstack([P, rng.uniform(lo, hi, size=(n_out, 3))])
        n_out = int(round(cfg.outlier_fraction * len(Q)))
        Q = np.vstack([Q, rng.uniform(lo, hi, size=(n_out, 3))])

    # move the source away from the target frame; gt undoes the motion
    R = rotation_about_axis(rng.normal(size=3), np.deg2rad(rng.uniform(0.0, cfg.rotation_magnitude)))
    tdir = rng.normal(size=3)
    tvec = tdir / np.linalg.norm(tdir) * rng.uniform(0.0, cfg.translation_magnitude)
    motion = RigidTransform(R, tvec)
    source = PointCloud(motion.apply(P))
    gt = motion.inverse()
    target = PointCloud(Q)
    return SynthPair(source, target, gt, mutual_pairs_within(source, target, gt, cfg.r_o), overlap)
