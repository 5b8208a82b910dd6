"""Cross-feature costs, intra-cloud structure costs and the Gromov-Wasserstein term.

Matrix routines accept optional leading batch dimensions so that many small
patch problems can be evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_points

FEATURE_NORM_FLOOR = 1e-12


class DegenerateFeatureError(ValueError):
    """A feature vector has (near) zero norm and cannot be normalized."""


class ShapeError(ValueError):
    pass


def check_features(F) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("feature entries must be finite")
    norms = np.linalg.norm(F, axis=1)
    if np.any(norms < FEATURE_NORM_FLOOR):
        raise DegenerateFeatureError(f"{int(np.sum(norms < FEATURE_NORM_FLOOR))} feature row(s) have zero norm")
    return F


def _unit_rows(F: np.ndarray) -> np.ndarray:
    return F / np.linalg.norm(F, axis=-1, keepdims=True)


def feature_distance(f, g) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf < FEATURE_NORM_FLOOR or ng < FEATURE_NORM_FLOOR:
        raise DegenerateFeatureError("zero-norm feature vector")
    return float(np.linalg.norm(f / nf - g / ng))


def euclid_structure_distance(p, q) -> float:
    return float(2.0 * np.tanh(np.linalg.norm(np.asarray(p, float) - np.asarray(q, float))))


def _pairwise_distance(A: np.ndarray, B: np.ndarray, chunk: int = 256) -> np.ndarray:
    # explicit differences: the 2 - 2 a.b shortcut loses ~1e-8 near zero
    out = np.empty((len(A), len(B)))
    for s in range(0, len(A), chunk):
        d = A[s:s + chunk, None, :] - B[None, :, :]
        out[s:s + chunk] = np.sqrt(np.sum(d * d, axis=-1))
    return out


def build_cross_cost(Fp, Fq) -> np.ndarray:
    """Entry ``(i, j)`` is the distance between L2-normalized features."""
    Fp, Fq = check_features(Fp), check_features(Fq)
    if Fp.shape[1] != Fq.shape[1]:
        raise ShapeError(f"feature dimensions differ: {Fp.shape[1]} vs {Fq.shape[1]}")
    return _pairwise_distance(_unit_rows(Fp), _unit_rows(Fq))


def build_structure_cost(cloud, F, lam: float = 0.1) -> np.ndarray:
    """Blend of ``2 tanh`` Euclidean distance (weight ``lam``) and feature distance."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    pts = as_points(cloud)
    F = check_features(F)
    if len(pts) != len(F):
        raise ShapeError(f"{len(pts)} points but {len(F)} feature rows")
    De = 2.0 * np.tanh(_pairwise_distance(pts, pts))
    Df = _pairwise_distance(_unit_rows(F), _unit_rows(F))
    C = lam * De + (1.0 - lam) * Df
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 0.0)
    return C


@dataclass(frozen=True)
class CostBundle:
    cross: np.ndarray
    struct_p: np.ndarray
    struct_q: np.ndarray
    lam: float = 0.1

    def __post_init__(self):
        cross = np.asarray(self.cross, dtype=np.float64)
        sp = np.asarray(self.struct_p, dtype=np.float64)
        sq = np.asarray(self.struct_q, dtype=np.float64)
        n, m = cross.shape[-2:]
        if sp.shape[-2:] != (n, n) or sq.shape[-2:] != (m, m):
            raise ShapeError(f"structure shapes {sp.shape}, {sq.shape} do not fit cross cost {cross.shape}")
        object.__setattr__(self, "cross", cross)
        object.__setattr__(self, "struct_p", sp)
        object.__setattr__(self, "struct_q", sq)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cross.shape[-2:]

    @classmethod
    def from_clouds(cls, cloud_p, Fp, cloud_q, Fq, lam: float = 0.1) -> CostBundle:
        return cls(build_cross_cost(Fp, Fq),
                   build_structure_cost(cloud_p, Fp, lam),
                   build_structure_cost(cloud_q, Fq, lam),
                   lam)


def _check_gw_shapes(struct_p, struct_q, coupling):
    n, m = coupling.shape[-2:]
    if struct_p.shape[-2:] != (n, n) or struct_q.shape[-2:] != (m, m):
        raise ShapeError(f"inconsistent shapes: C^p {struct_p.shape}, C^q {struct_q.shape}, coupling {coupling.shape}")


def gw_term(struct_p, struct_q, coupling) -> np.ndarray:
    """``H[k, l] = sum_ij (C^p[i, k] - C^q[j, l])**2 * coupling[i, j]``.

    Evaluated through the expansion of the square, which costs two matrix
    products instead of a quadruple loop.
    """
    Cp = np.asarray(struct_p, dtype=np.float64)
    Cq = np.asarray(struct_q, dtype=np.float64)
    G = np.asarray(coupling, dtype=np.float64)
    _check_gw_shapes(Cp, Cq, G)
    a = G.sum(axis=-1)
    b = G.sum(axis=-2)
    CpT = np.swapaxes(Cp, -1, -2)
    term_p = ((CpT * CpT) @ a[..., None])          # (..., N, 1)
    term_q = (b[..., None, :] @ (Cq * Cq))         # (..., 1, M)
    return term_p + term_q - 2.0 * (CpT @ G @ Cq)


def gw_objective(struct_p, struct_q, coupling) -> float:
    G = np.asarray(coupling, dtype=np.float64)
    H = gw_term(struct_p, struct_q, G)
    return np.sum(H * G, axis=(-2, -1))
