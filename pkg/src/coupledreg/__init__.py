"""Rigid point cloud registration by coupled Wasserstein / Gromov-Wasserstein transport."""

from .costs import CostBundle, build_cross_cost, build_structure_cost, gw_term
from .geometry import PointCloud, RigidTransform, voxel_downsample
from .otsolve import SolverConfig, coupled_objective, sinkhorn_unbalanced, solve_coupled_ot
from .pipeline import CorrespondenceSet, MatchConfig, match_clouds, predict_correspondences
from .pose import RansacConfig, ransac_register, weighted_procrustes

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet", "CostBundle", "MatchConfig", "PointCloud", "RansacConfig", "RigidTransform",
    "SolverConfig", "build_cross_cost", "build_structure_cost", "coupled_objective", "gw_term",
    "match_clouds", "predict_correspondences", "ransac_register", "sinkhorn_unbalanced",
    "solve_coupled_ot", "voxel_downsample", "weighted_procrustes",
]
