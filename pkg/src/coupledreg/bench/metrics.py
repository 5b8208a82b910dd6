"""Registration metrics: inlier ratio, feature matching recall, registration recall."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..geometry import EmptyInputError, RigidTransform, as_points


class ReportSchemaError(KeyError):
    pass


@dataclass(frozen=True)
class EvalThresholds:
    inlier_radius: float = 0.1
    fmr_min_inlier_ratio: float = 0.05
    rr_rmse: float = 0.2
    rr_rre: float = 5.0      # degrees
    rr_rte: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> EvalThresholds:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown EvalThresholds fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def inlier_ratio(pairs, src, tgt, gt: RigidTransform, radius: float) -> tuple[float, bool]:
    """Fraction of pairs whose residual under ``gt`` is below ``radius``.

    Returns ``(ratio, empty)``; an empty set scores 0 with ``empty`` set.
    """
    idx = pairs.index_pairs() if hasattr(pairs, "index_pairs") else np.asarray(pairs, np.intp).reshape(-1, 2)
    if len(idx) == 0:
        return 0.0, True
    r = gt.apply(as_points(src)[idx[:, 0]]) - as_points(tgt)[idx[:, 1]]
    return float(np.mean(np.linalg.norm(r, axis=1) < radius)), False


def _field(rec, name):
    try:
        return rec[name]
    except (KeyError, TypeError):
        pass
    if hasattr(rec, name):
        return getattr(rec, name)
    raise ReportSchemaError(f"report record lacks field {name!r}")


def feature_matching_recall(inlier_ratios, threshold: float = 0.05) -> float:
    """Fraction of pairs whose inlier ratio exceeds ``threshold``."""
    irs = np.asarray([_field(r, "ir") if not np.isscalar(r) else r for r in inlier_ratios], dtype=np.float64)
    if irs.size == 0:
        raise EmptyInputError("feature matching recall of an empty report list")
    return float(np.mean(irs > threshold))


def registration_recall(reports, thresholds: EvalThresholds = EvalThresholds(), mode: str = "rmse") -> float:
    """Fraction of pairs registered successfully.

    ``rmse`` mode counts RMSE < rr_rmse, ``rre_rte`` counts RRE < rr_rre and
    RTE < rr_rte. Records with a missing value (failed pair) count as misses.
    """
    reports = list(reports)
    if not reports:
        raise EmptyInputError("registration recall of an empty report list")
    hits = 0
    for rec in reports:
        if mode == "rmse":
            rmse = _field(rec, "rmse")
            hits += rmse is not None and rmse < thresholds.rr_rmse
        elif mode == "rre_rte":
            rre, rte = _field(rec, "rre"), _field(rec, "rte")
            hits += rre is not None and rte is not None and rre < thresholds.rr_rre and rte < thresholds.rr_rte
        else:
            raise ValueError(f"unknown recall mode {mode!r}")
    return hits / len(reports)
