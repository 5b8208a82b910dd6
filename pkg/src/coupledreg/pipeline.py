"""Coarse-to-fine correspondence prediction.

Superpoints are voxel centroids; every fine point joins the patch of its
nearest superpoint. Superpoints are matched with the coupled transport
solver and filtered by mutual maxima, then each matched patch pair is solved
again at point level and the per-patch matches are merged.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Protocol

import numpy as np

from .costs import CostBundle, build_cross_cost, build_structure_cost
from .geometry import (PointCloud, RigidTransform, as_points, nearest_neighbors,
                       radius_neighbors, voxel_downsample)
from .otsolve import SolverConfig, solve_coupled_ot

logger = logging.getLogger(__name__)

MAX_SUPERPOINTS = 2048


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


# --- data types --------------------------------------------------------------

@dataclass(frozen=True)
class Superpoints:
    points: PointCloud
    assignment: np.ndarray                  # fine point -> superpoint
    members: tuple = field(repr=False)      # superpoint -> fine indices

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CorrespondenceSet:
    src: np.ndarray
    tgt: np.ndarray
    confidence: np.ndarray
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.intp).reshape(-1)
        self.tgt = np.asarray(self.tgt, dtype=np.intp).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.tgt) == len(self.confidence)):
            raise ValueError("src, tgt and confidence must have equal length")
        if np.any(~np.isfinite(self.confidence)) or np.any(self.confidence < 0):
            raise ValueError("confidences must be finite and non-negative")

    @classmethod
    def empty(cls, *diagnostics: str) -> CorrespondenceSet:
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), list(diagnostics))

    def __len__(self) -> int:
        return len(self.src)

    def index_pairs(self) -> np.ndarray:
        return np.stack([self.src, self.tgt], axis=1)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for i, j, c in zip(self.src, self.tgt, self.confidence):
                fh.write(f"{i}\t{j}\t{c:.17g}\n")

    @classmethod
    def read(cls, path) -> CorrespondenceSet:
        data = np.loadtxt(path, ndmin=2)
        if data.size == 0:
            return cls.empty()
        return cls(data[:, 0].astype(np.intp), data[:, 1].astype(np.intp), data[:, 2])


def _solver_from(obj) -> SolverConfig:
    if isinstance(obj, SolverConfig):
        return obj
    return SolverConfig(**(obj or {}))


MAX_PATCH = 256     # dense per-patch OT stays small


@dataclass(frozen=True)
class MatchConfig:
    coarse_voxel: float = 0.08
    patch_size: int = 64
    feature_provider: str = "oracle"
    overlap_provider: str = "uniform"
    coarse_solver: SolverConfig = SolverConfig()
    fine_solver: SolverConfig = SolverConfig()
    coarse_lambda: float = 0.1
    fine_lambda: float = 0.1
    mnn_enabled: bool = True
    overlap_radius: float = 0.0375
    descriptor_radius_coarse: float = 0.25
    descriptor_radius_fine: float = 0.08
    oracle_lengthscale: float | None = None   # None: plain aligned coordinates
    min_confidence: float = 1e-6
    coarse_min_confidence: float = 1e-6
    max_superpoints: int = MAX_SUPERPOINTS
    fine_batch: int = 32

    def __post_init__(self):
        if not 3 <= self.patch_size <= MAX_PATCH:
            raise ValueError(f"patch_size must lie in [3, {MAX_PATCH}]")
        if self.coarse_voxel <= 0:
            raise ValueError("coarse_voxel must be positive")
        # "external" means features are handed in alongside the clouds
        if self.feature_provider not in ("oracle", "spectral", "external"):
            raise ValueError(f"unknown feature provider {self.feature_provider!r}")
        if self.overlap_provider not in ("uniform", "gt"):
            raise ValueError(f"unknown overlap provider {self.overlap_provider!r}")
        object.__setattr__(self, "coarse_solver", _solver_from(self.coarse_solver))
        object.__setattr__(self, "fine_solver", _solver_from(self.fine_solver))

    @classmethod
    def from_dict(cls, d: dict) -> MatchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MatchConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- superpoints and grouping -------------------------------------------------

def group_by_nearest(fine, centers) -> tuple[np.ndarray, tuple]:
    assignment, _ = nearest_neighbors(fine, centers)
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(len(as_points(centers)) + 1))
    members = tuple(order[bounds[k]:bounds[k + 1]] for k in range(len(bounds) - 1))
    return assignment, members


def make_superpoints(cloud, coarse_voxel: float, max_superpoints: int = MAX_SUPERPOINTS) -> Superpoints:
    """Voxel centroids as superpoints, each fine point grouped with its nearest one."""
    voxel = float(coarse_voxel)
    centers, _ = voxel_downsample(cloud, voxel)
    while len(centers) > max_superpoints:
        voxel *= 1.25
        centers, _ = voxel_downsample(cloud, voxel)
    if voxel != coarse_voxel:
        warnings.warn(f"coarse voxel raised from {coarse_voxel} to {voxel:.4g} to keep "
                      f"superpoints <= {max_superpoints}", RuntimeWarning, stacklevel=2)
    assignment, members = group_by_nearest(cloud, centers)
    return Superpoints(centers, assignment, members)


# --- feature providers --------------------------------------------------------

def oracle_features(cloud, gt: RigidTransform, center=(0.0, 0.0, 0.0), scale: float = 1.0,
                    bias: float = 1.0) -> np.ndarray:
    """Coordinates in the ground-truth aligned frame plus a constant bias channel.

    Points that coincide after alignment get identical rows; the bias keeps
    every row away from zero norm.
    """
    aligned = (gt.apply(as_points(cloud)) - np.asarray(center, dtype=np.float64)) / scale
    return np.hstack([aligned, np.full((len(aligned), 1), bias)])


def oracle_kernel_features(cloud, gt: RigidTransform, lengthscale: float, dim: int = 256,
                           seed: int = 0) -> np.ndarray:
    """Random Fourier features of the ground-truth aligned coordinates.

    Rows are unit vectors whose inner products approximate the Gaussian
    kernel ``exp(-|x - y|^2 / (2 l^2))``, so feature distance is ~0 for
    coincident points and saturates near sqrt(2) beyond a few lengthscales,
    like a descriptor trained with positive/negative margins.
    """
    if lengthscale <= 0 or dim < 2 or dim % 2:
        raise ValueError("lengthscale must be positive and dim a positive even number")
    W = np.random.default_rng(seed).normal(scale=1.0 / lengthscale, size=(3, dim // 2))
    z = gt.apply(as_points(cloud)) @ W
    return np.hstack([np.cos(z), np.sin(z)]) / np.sqrt(dim // 2)


SPECTRAL_BINS = 8


def spectral_descriptor(cloud, radius: float, bins: int = SPECTRAL_BINS) -> np.ndarray:
    """Rotation-invariant local shape descriptor.

    Per point: the neighbourhood covariance eigenvalues (descending, divided
    by their sum) followed by a normalized histogram of neighbour distances
    in ``(0, radius]``; the row is L2-normalized. Points with fewer than
    three neighbours use (1/3, 1/3, 1/3) for the eigenvalue part.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = as_points(cloud)
    neigh = radius_neighbors(pts, radius)
    edges = np.linspace(0.0, radius, bins + 1)
    out = np.zeros((len(pts), 3 + bins))
    for i, idx in enumerate(neigh):
        d = np.linalg.norm(pts[idx] - pts[i], axis=1)
        others = d > 0.0
        d = d[others]
        hist = np.zeros(bins)
        if len(d):
            # right-closed bins over (0, radius]
            k = np.clip(np.searchsorted(edges, d, side="left") - 1, 0, bins - 1)
            hist = np.bincount(k, minlength=bins).astype(np.float64) / len(d)
        if len(d) < 3:
            eig = np.full(3, 1.0 / 3.0)
        else:
            nb = pts[idx]
            cov = np.cov(nb.T, bias=True)
            ev = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)
            s = ev.sum()
            eig = ev / s if s > 0 else np.full(3, 1.0 / 3.0)
        row = np.concatenate([eig, hist])
        out[i] = row / np.linalg.norm(row)
    return out


class FeatureProvider(Protocol):
    def __call__(self, cloud: PointCloud, side: str, level: str,
                 gt: RigidTransform | None, superpoints: Superpoints | None) -> np.ndarray: ...


class OracleFeatures:
    """Test instrument: requires the ground-truth transform of the pair."""

    def __init__(self, lengthscale: float | None = None, dim: int = 256, seed: int = 0):
        self.lengthscale = lengthscale
        self.dim = dim
        self.seed = seed

    def __call__(self, cloud, side, level, gt, superpoints=None):
        if gt is None:
            raise ValueError("oracle features need the ground-truth transform")
        frame = gt if side == "p" else RigidTransform.identity()
        if self.lengthscale is None:
            return oracle_features(cloud, frame)
        return oracle_kernel_features(cloud, frame, self.lengthscale, self.dim, self.seed)


class SpectralFeatures:
    def __init__(self, radius_coarse: float, radius_fine: float, bins: int = SPECTRAL_BINS):
        self.radius = {"coarse": radius_coarse, "fine": radius_fine}
        self.bins = bins

    def __call__(self, cloud, side, level, gt=None, superpoints=None):
        return spectral_descriptor(cloud, self.radius[level], self.bins)


class ExternalFeatures:
    """Fine-level descriptors supplied by the caller; coarse rows are patch means."""

    def __init__(self, Fp, Fq):
        self.F = {"p": np.asarray(Fp, dtype=np.float64), "q": np.asarray(Fq, dtype=np.float64)}

    def __call__(self, cloud, side, level, gt=None, superpoints=None):
        F = self.F[side]
        if level == "fine":
            if len(F) != len(cloud):
                raise ValueError(f"{len(F)} feature rows for {len(cloud)} points")
            return F
        unit = F / np.linalg.norm(F, axis=1, keepdims=True)
        return np.stack([unit[m].mean(axis=0) if len(m) else unit.mean(axis=0)
                         for m in superpoints.members])


# --- overlap providers --------------------------------------------------------

def gt_overlap_scores(cloud_p, cloud_q, gt: RigidTransform, r_o: float, level: str = "fine",
                      superpoints: Superpoints | None = None) -> np.ndarray:
    """Ground-truth overlap of ``cloud_p`` with ``cloud_q``.

    Fine level: 1 where the aligned point has a neighbour in ``cloud_q``
    closer than ``r_o``, else 0. Coarse level: the fraction of such points in
    each superpoint's patch.
    """
    aligned = gt.apply(as_points(cloud_p))
    _, dist = nearest_neighbors(aligned, cloud_q)
    visible = (dist < r_o).astype(np.float64)
    if level == "fine":
        return visible
    if superpoints is None:
        raise ValueError("coarse overlap scores need the superpoint grouping")
    return np.array([visible[m].mean() if len(m) else 0.0 for m in superpoints.members])


class OverlapProvider(Protocol):
    def __call__(self, cloud_p, cloud_q, level: str, gt, sp_p, sp_q) -> tuple[np.ndarray, np.ndarray]: ...


class UniformOverlap:
    def __call__(self, cloud_p, cloud_q, level, gt=None, sp_p=None, sp_q=None):
        n = len(sp_p) if level == "coarse" else len(cloud_p)
        m = len(sp_q) if level == "coarse" else len(cloud_q)
        return np.ones(n), np.ones(m)


class GroundTruthOverlap:
    def __init__(self, r_o: float):
        self.r_o = r_o

    def __call__(self, cloud_p, cloud_q, level, gt, sp_p=None, sp_q=None):
        if gt is None:
            raise ValueError("ground-truth overlap scores need the ground-truth transform")
        mu_p = gt_overlap_scores(cloud_p, cloud_q, gt, self.r_o, level, sp_p)
        mu_q = gt_overlap_scores(cloud_q, cloud_p, gt.inverse(), self.r_o, level, sp_q)
        return mu_p, mu_q


def make_feature_provider(cfg: MatchConfig, external=None) -> FeatureProvider:
    if external is not None:
        return ExternalFeatures(*external)
    if cfg.feature_provider == "oracle":
        return OracleFeatures(cfg.oracle_lengthscale)
    if cfg.feature_provider == "spectral":
        return SpectralFeatures(cfg.descriptor_radius_coarse, cfg.descriptor_radius_fine)
    raise ValueError("the external feature provider needs feature arrays for both clouds")


def make_overlap_provider(cfg: MatchConfig) -> OverlapProvider:
    if cfg.overlap_provider == "uniform":
        return UniformOverlap()
    if cfg.overlap_provider == "gt":
        return GroundTruthOverlap(cfg.overlap_radius)
    raise ValueError(f"unknown overlap provider {cfg.overlap_provider!r}")


# --- matching -----------------------------------------------------------------

def mutual_max_pairs(gamma: np.ndarray, mutual: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Row-argmax pairs, optionally kept only when also the column argmax."""
    rows = np.arange(gamma.shape[0])
    cols = np.argmax(gamma, axis=1)
    if mutual:
        keep = np.argmax(gamma, axis=0)[cols] == rows
        rows, cols = rows[keep], cols[keep]
    return rows, cols


def coarse_match(sp_p: Superpoints, sp_q: Superpoints, Fp, Fq, mu_p, mu_q,
                 cfg: MatchConfig) -> CorrespondenceSet:
    bundle = CostBundle.from_clouds(sp_p.points, Fp, sp_q.points, Fq, cfg.coarse_lambda)
    gamma = solve_coupled_ot(bundle, mu_p, mu_q, cfg.coarse_solver)
    rows, cols = mutual_max_pairs(gamma, cfg.mnn_enabled)
    conf = gamma[rows, cols]
    keep = conf > cfg.coarse_min_confidence
    return CorrespondenceSet(rows[keep], cols[keep], np.minimum(conf[keep], 1.0))


def top_k_by_score(members: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """The ``k`` highest-scoring members (ties to the lowest index), ascending."""
    if len(members) <= k:
        return np.asarray(members)
    order = np.lexsort((members, -scores[members]))
    return np.sort(members[order[:k]])


@dataclass
class _Patch:
    src: np.ndarray
    tgt: np.ndarray


def _solve_patch_batch(patches, pts_p, pts_q, Fp, Fq, mu_p, mu_q, cfg: MatchConfig):
    n_max = max(len(pt.src) for pt in patches)
    m_max = max(len(pt.tgt) for pt in patches)
    B = len(patches)
    cross = np.full((B, n_max, m_max), 2.0)
    sp = np.zeros((B, n_max, n_max))
    sq = np.zeros((B, m_max, m_max))
    mp = np.zeros((B, n_max))
    mq = np.zeros((B, m_max))
    for b, pt in enumerate(patches):
        n, m = len(pt.src), len(pt.tgt)
        cross[b, :n, :m] = build_cross_cost(Fp[pt.src], Fq[pt.tgt])
        sp[b, :n, :n] = build_structure_cost(pts_p[pt.src], Fp[pt.src], cfg.fine_lambda)
        sq[b, :m, :m] = build_structure_cost(pts_q[pt.tgt], Fq[pt.tgt], cfg.fine_lambda)
        mp[b, :n] = mu_p[pt.src]
        mq[b, :m] = mu_q[pt.tgt]
    gamma = solve_coupled_ot(CostBundle(cross, sp, sq, cfg.fine_lambda), mp, mq, cfg.fine_solver)
    out = []
    for b, pt in enumerate(patches):
        g = gamma[b, :len(pt.src), :len(pt.tgt)]
        rows, cols = mutual_max_pairs(g, True)
        conf = g[rows, cols]
        keep = conf > cfg.min_confidence
        out.append((pt.src[rows[keep]], pt.tgt[cols[keep]], np.minimum(conf[keep], 1.0)))
    return out


def _prepare_patches(coarse: CorrespondenceSet, sp_p, sp_q, mu_p, mu_q, cfg, diagnostics):
    patches = []
    for i, j in zip(coarse.src, coarse.tgt):
        src = top_k_by_score(sp_p.members[i], mu_p, cfg.patch_size)
        tgt = top_k_by_score(sp_q.members[j], mu_q, cfg.patch_size)
        if len(src) < 1 or len(tgt) < 1:
            diagnostics.append(f"skipped empty patch pair ({i}, {j})")
            continue
        if mu_p[src].sum() <= 0 or mu_q[tgt].sum() <= 0:
            diagnostics.append(f"skipped zero-mass patch pair ({i}, {j})")
            continue
        patches.append(_Patch(src, tgt))
    return patches


def fine_match(pair, sp_p: Superpoints, sp_q: Superpoints, cloud_p, cloud_q, Fp, Fq, mu_p, mu_q,
               cfg: MatchConfig) -> CorrespondenceSet:
    """Point-level matches inside the patches of one coarse pair ``(i, j)``."""
    diagnostics: list[str] = []
    coarse = CorrespondenceSet([pair[0]], [pair[1]], [1.0])
    patches = _prepare_patches(coarse, sp_p, sp_q, np.asarray(mu_p, float), np.asarray(mu_q, float),
                               cfg, diagnostics)
    if not patches:
        return CorrespondenceSet.empty(*diagnostics)
    (src, tgt, conf), = _solve_patch_batch(patches, as_points(cloud_p), as_points(cloud_q),
                                            np.asarray(Fp, float), np.asarray(Fq, float),
                                            np.asarray(mu_p, float), np.asarray(mu_q, float), cfg)
    return CorrespondenceSet(src, tgt, conf, diagnostics)


def merge_correspondences(parts) -> CorrespondenceSet:
    """Union of correspondence sets; duplicate ``(i, j)`` keep their max confidence."""
    best: dict[tuple[int, int], float] = {}
    for src, tgt, conf in parts:
        for i, j, c in zip(src.tolist(), tgt.tolist(), conf.tolist()):
            if c > best.get((i, j), -1.0):
                best[(i, j)] = c
    if not best:
        return CorrespondenceSet.empty()
    keys = sorted(best)
    arr = np.array(keys, dtype=np.intp)
    return CorrespondenceSet(arr[:, 0], arr[:, 1], np.array([best[k] for k in keys]))


@dataclass
class MatchResult:
    correspondences: CorrespondenceSet
    coarse: CorrespondenceSet
    sp_p: Superpoints
    sp_q: Superpoints


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except Exception as exc:  # tagged and re-raised
        raise PipelineError(name, exc) from exc


def match_clouds(cloud_p, cloud_q, cfg: MatchConfig = MatchConfig(), gt: RigidTransform | None = None,
                 features=None) -> MatchResult:
    cloud_p = cloud_p if isinstance(cloud_p, PointCloud) else PointCloud(cloud_p)
    cloud_q = cloud_q if isinstance(cloud_q, PointCloud) else PointCloud(cloud_q)
    feat = make_feature_provider(cfg, features)
    overlap = make_overlap_provider(cfg)

    sp_p = _stage("superpoints", make_superpoints, cloud_p, cfg.coarse_voxel, cfg.max_superpoints)
    sp_q = _stage("superpoints", make_superpoints, cloud_q, cfg.coarse_voxel, cfg.max_superpoints)
    Fp_bar = _stage("features", feat, sp_p.points, "p", "coarse", gt, sp_p)
    Fq_bar = _stage("features", feat, sp_q.points, "q", "coarse", gt, sp_q)
    mu_p_bar, mu_q_bar = _stage("overlap", overlap, cloud_p, cloud_q, "coarse", gt, sp_p, sp_q)
    coarse = _stage("coarse", coarse_match, sp_p, sp_q, Fp_bar, Fq_bar, mu_p_bar, mu_q_bar, cfg)
    if len(coarse) == 0:
        return MatchResult(CorrespondenceSet.empty("no coarse matches"), coarse, sp_p, sp_q)

    Fp = _stage("features", feat, cloud_p, "p", "fine", gt, None)
    Fq = _stage("features", feat, cloud_q, "q", "fine", gt, None)
    mu_p, mu_q = _stage("overlap", overlap, cloud_p, cloud_q, "fine", gt, sp_p, sp_q)

    diagnostics: list[str] = []
    patches = _prepare_patches(coarse, sp_p, sp_q, mu_p, mu_q, cfg, diagnostics)
    # similar sizes share a padded batch
    patches.sort(key=lambda pt: (max(len(pt.src), len(pt.tgt)), len(pt.src), len(pt.tgt)))
    parts = []
    for s in range(0, len(patches), cfg.fine_batch):
        parts += _stage("fine", _solve_patch_batch, patches[s:s + cfg.fine_batch], cloud_p.points,
                        cloud_q.points, Fp, Fq, mu_p, mu_q, cfg)
    merged = merge_correspondences(parts)
    merged.diagnostics = diagnostics
    return MatchResult(merged, coarse, sp_p, sp_q)


def predict_correspondences(cloud_p, cloud_q, cfg: MatchConfig = MatchConfig(),
                            gt: RigidTransform | None = None, features=None) -> CorrespondenceSet:
    return match_clouds(cloud_p, cloud_q, cfg, gt, features).correspondences
