"""Rigid transform recovery from correspondences: weighted Procrustes and RANSAC."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, as_points


class InsufficientPairsError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 50_000
    inlier_threshold: float = 0.05
    sample_size: int = 3
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.sample_size < 3:
            raise ValueError("sample_size must be at least 3")


def _pair_array(pairs) -> np.ndarray:
    if hasattr(pairs, "index_pairs"):
        return pairs.index_pairs()
    return np.asarray(pairs, dtype=np.intp).reshape(-1, 2)


def _procrustes(p: np.ndarray, q: np.ndarray, w: np.ndarray) -> RigidTransform:
    if len(p) < 3:
        raise InsufficientPairsError(f"need at least 3 pairs, got {len(p)}")
    if np.any(w < 0) or not np.sum(w) > 0:
        raise ValueError("weights must be non-negative with positive sum")
    w = w / np.sum(w)
    p_bar = w @ p
    q_bar = w @ q
    P = p - p_bar
    Q = q - q_bar
    H = (P * w[:, None]).T @ Q
    U, S, Vt = np.linalg.svd(H)
    # collinear (or coincident) weighted points leave rotation undetermined
    scale = np.sqrt(np.sum(w * np.sum(P * P, axis=1)))
    if scale == 0.0 or S[1] <= 1e-12 * max(S[0], scale * scale):
        raise DegenerateGeometryError("weighted source points are collinear")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    # polish rounding so the SO(3) check in RigidTransform always holds
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, q_bar - R @ p_bar)


def weighted_procrustes(pairs, src, tgt, weights=None) -> RigidTransform:
    """Minimize ``sum_k w_k |R p_k + t - q_k|^2`` in closed form (Kabsch/Umeyama, no scale)."""
    idx = _pair_array(pairs)
    p = as_points(src)[idx[:, 0]]
    q = as_points(tgt)[idx[:, 1]]
    w = np.ones(len(idx)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(idx):
        raise ValueError(f"{len(w)} weights for {len(idx)} pairs")
    return _procrustes(p, q, w)


@dataclass(frozen=True)
class RansacResult:
    transform: RigidTransform
    inliers: np.ndarray
    iterations: int
    failed: bool = False

    def __iter__(self):
        # allows ``tf, mask = ransac_register(...)``
        yield self.transform
        yield self.inliers


def _required_iters(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    good = inlier_ratio ** sample_size
    if good <= 0.0:
        return np.inf
    if good >= 1.0:
        return 0.0
    return np.log(1.0 - confidence) / np.log(1.0 - good)


def ransac_register(pairs, src, tgt, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Hypothesize-and-verify rigid registration from putative correspondences.

    Minimal samples of ``cfg.sample_size`` pairs are drawn from a generator
    seeded with ``cfg.seed``; the best hypothesis (most inliers, earliest on
    ties) is refit on all its inliers.
    """
    idx = _pair_array(pairs)
    n = len(idx)
    if n < cfg.sample_size:
        raise InsufficientPairsError(f"need at least {cfg.sample_size} pairs, got {n}")
    p = as_points(src)[idx[:, 0]]
    q = as_points(tgt)[idx[:, 1]]
    rng = np.random.default_rng(cfg.seed)
    ones = np.ones(cfg.sample_size)
    thr2 = cfg.inlier_threshold ** 2

    best_count = -1
    best_tf = None
    best_mask = np.zeros(n, dtype=bool)
    it = 0
    while it < cfg.max_iters:
        it += 1
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        try:
            tf = _procrustes(p[sample], q[sample], ones)
        except DegenerateGeometryError:
            continue
        r = p @ tf.rotation.T + tf.translation - q
        mask = np.einsum("ij,ij->i", r, r) < thr2
        count = int(mask.sum())
        if count > best_count:
            best_count, best_tf, best_mask = count, tf, mask
            if it >= _required_iters(count / n, cfg.sample_size, cfg.confidence):
                break

    if best_tf is None:
        raise DegenerateGeometryError("every minimal sample was degenerate")
    if best_count == 0:
        return RansacResult(best_tf, best_mask, it, failed=True)
    if best_count >= 3:
        try:
            refit = _procrustes(p[best_mask], q[best_mask], np.ones(best_count))
        except DegenerateGeometryError:
            refit = None
        if refit is not None:
            r = p @ refit.rotation.T + refit.translation - q
            mask = np.einsum("ij,ij->i", r, r) < thr2
            # keep the refit only if it does not lose inliers
            if mask.sum() >= best_count:
                return RansacResult(refit, mask, it)
    return RansacResult(best_tf, best_mask, it)
