"""Scenario files, batch evaluation and the EvalReport."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import (RigidTransform, pose_error, read_points, read_transform,
                        rmse_under_transform)
from ..pipeline import MatchConfig, predict_correspondences
from ..pose import RansacConfig, ransac_register, weighted_procrustes
from .metrics import EvalThresholds, feature_matching_recall, inlier_ratio, registration_recall
from .synth import SynthConfig, generate_pair, mutual_pairs_within


class ScenarioError(ValueError):
    """Malformed scenario or a file it references cannot be read."""


ESTIMATORS = ("ransac", "svd")
_SCENARIO_KEYS = {"name", "seed", "workers", "estimator", "recall_mode", "match", "ransac",
                  "thresholds", "synth", "generate", "pairs"}


def derive_seed(seed: int, pair_index: int, stream: int = 0) -> int:
    """Independent 63-bit seed for one pair and one random stream."""
    ss = np.random.SeedSequence([int(seed), int(pair_index), int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    workers: int = 1
    estimator: str = "ransac"
    recall_mode: str = "rmse"
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: dict = field(default_factory=dict)
    thresholds: EvalThresholds = field(default_factory=EvalThresholds)
    pairs: list = field(default_factory=list)      # one dict per pair, ids resolved
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> Scenario:
        if not isinstance(d, dict):
            raise ScenarioError("scenario must be a JSON object")
        unknown = set(d) - _SCENARIO_KEYS
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            sc = cls(name=str(d.get("name", "scenario")),
                     seed=int(d.get("seed", 0)),
                     workers=int(d.get("workers", 1)),
                     estimator=d.get("estimator", "ransac"),
                     recall_mode=d.get("recall_mode", "rmse"),
                     match=MatchConfig.from_dict(d.get("match", {})),
                     ransac=dict(d.get("ransac", {})),
                     thresholds=EvalThresholds.from_dict(d.get("thresholds", {})),
                     base_dir=Path(base_dir))
            RansacConfig(**sc.ransac)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from exc
        if sc.estimator not in ESTIMATORS:
            raise ScenarioError(f"estimator must be one of {ESTIMATORS}")
        if sc.recall_mode not in ("rmse", "rre_rte"):
            raise ScenarioError("recall_mode must be 'rmse' or 'rre_rte'")
        if sc.workers < 1:
            raise ScenarioError("workers must be at least 1")

        synth_defaults = dict(d.get("synth", {}))
        pairs = [dict(p) for p in d.get("pairs", [])]
        gen = d.get("generate")
        if gen is not None:
            pairs += [{"synth": {}, "vary": gen.get("vary", {})} for _ in range(int(gen["count"]))]
        if not pairs:
            raise ScenarioError("scenario lists no pairs")
        for k, p in enumerate(pairs):
            p.setdefault("id", f"pair_{k:03d}")
            if "synth" in p:
                p["synth"] = {**synth_defaults, **p["synth"]}
            elif "source" not in p or "target" not in p:
                raise ScenarioError(f"pair {p['id']} needs either 'synth' or 'source' and 'target'")
            else:
                for key in ("source", "target", "gt", "features_source", "features_target"):
                    if key in p:
                        path = sc.base_dir / p[key]
                        if not path.is_file():
                            raise ScenarioError(f"pair {p['id']}: missing file {path}")
                        p[key] = str(path)
        ids = [p["id"] for p in pairs]
        if len(set(ids)) != len(ids):
            raise ScenarioError("pair ids must be unique")
        sc.pairs = pairs
        return sc

    @classmethod
    def load(cls, path) -> Scenario:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ScenarioError(f"scenario file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d, base_dir=path.parent)


def _synth_config(spec: dict, seed: int, index: int) -> SynthConfig:
    params = dict(spec["synth"])
    rng = np.random.default_rng(derive_seed(seed, index, 1))
    for key, (lo, hi) in sorted(spec.get("vary", {}).items()):
        params[key] = float(rng.uniform(lo, hi))
    params.setdefault("seed", derive_seed(seed, index, 0))
    return SynthConfig.from_dict(params)


def load_pair(spec: dict, seed: int, index: int, r_o: float):
    """Source, target, gt, gt_pairs and optional external features for one pair."""
    if "synth" in spec:
        pair = generate_pair(_synth_config(spec, seed, index))
        return pair.source, pair.target, pair.gt, pair.gt_pairs, None
    src, tgt = read_points(spec["source"]), read_points(spec["target"])
    gt = read_transform(spec["gt"]) if "gt" in spec else None
    gt_pairs = mutual_pairs_within(src, tgt, gt, r_o) if gt is not None else None
    feats = None
    if "features_source" in spec:
        feats = (np.loadtxt(spec["features_source"], ndmin=2), np.loadtxt(spec["features_target"], ndmin=2))
    return src, tgt, gt, gt_pairs, feats


def estimate_pose(corr, src, tgt, estimator: str, ransac: RansacConfig) -> RigidTransform:
    if estimator == "svd":
        return weighted_procrustes(corr, src, tgt, corr.confidence)
    result = ransac_register(corr, src, tgt, ransac)
    if result.failed:
        raise RuntimeError("RANSAC found no inliers")
    return result.transform


def evaluate_pair(sc: Scenario, index: int) -> dict:
    spec = sc.pairs[index]
    rec = {"id": spec["id"], "ir": 0.0, "ir_empty": True, "n_corr": 0, "rmse": None, "rre": None,
           "rte": None, "success_rmse": False, "success_rre_rte": False, "error": None,
           "diagnostics": []}
    timings = {"model_ms": 0.0, "pose_ms": 0.0}
    try:
        src, tgt, gt, gt_pairs, feats = load_pair(spec, sc.seed, index, sc.match.overlap_radius)
        if gt is None:
            raise ValueError("evaluation needs a ground-truth transform")
        t0 = time.perf_counter()
        corr = predict_correspondences(src, tgt, sc.match, gt=gt, features=feats)
        t1 = time.perf_counter()
        rec["diagnostics"] = list(corr.diagnostics)
        rec["n_corr"] = len(corr)
        rec["ir"], rec["ir_empty"] = inlier_ratio(corr, src, tgt, gt, sc.thresholds.inlier_radius)
        ransac = RansacConfig(**{"seed": derive_seed(sc.seed, index, 2), **sc.ransac})
        est = estimate_pose(corr, src, tgt, sc.estimator, ransac)
        t2 = time.perf_counter()
        timings = {"model_ms": 1e3 * (t1 - t0), "pose_ms": 1e3 * (t2 - t1)}
        rec["rre"], rec["rte"] = (float(x) for x in pose_error(est, gt))
        rec["rmse"] = float(rmse_under_transform(src, tgt, gt_pairs, est)) if len(gt_pairs) else None
        th = sc.thresholds
        rec["success_rmse"] = rec["rmse"] is not None and rec["rmse"] < th.rr_rmse
        rec["success_rre_rte"] = rec["rre"] < th.rr_rre and rec["rte"] < th.rr_rte
    except Exception as exc:  # noqa: BLE001 - one bad pair must not stop the batch
        rec["error"] = f"{type(exc).__name__}: {exc}"
    rec["timings"] = timings
    return rec


def aggregate(records: list, thresholds: EvalThresholds, mode: str) -> dict:
    return {
        "n_pairs": len(records),
        "n_failed": sum(r["error"] is not None for r in records),
        "ir_mean": float(np.mean([r["ir"] for r in records])),
        "fmr": feature_matching_recall(records, thresholds.fmr_min_inlier_ratio),
        "rr_rmse": registration_recall(records, thresholds, "rmse"),
        "rr_rre_rte": registration_recall(records, thresholds, "rre_rte"),
        "rr": registration_recall(records, thresholds, mode),
    }


@dataclass
class EvalReport:
    scenario: str
    seed: int
    estimator: str
    recall_mode: str
    thresholds: EvalThresholds
    records: list
    aggregates: dict

    @property
    def all_processed(self) -> bool:
        return all(r["error"] is None for r in self.records)

    def to_dict(self) -> dict:
        # wall-clock timings stay out so that reruns serialize identically
        recs = [{k: v for k, v in r.items() if k != "timings"} for r in self.records]
        return {"scenario": self.scenario, "seed": self.seed, "estimator": self.estimator,
                "recall_mode": self.recall_mode, "thresholds": self.thresholds.to_dict(),
                "aggregates": self.aggregates, "records": recs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_json())
        with open(path.with_name(path.name + ".timings.tsv"), "w") as fh:
            fh.write("id\tmodel_ms\tpose_ms\ttotal_ms\n")
            for r in self.records:
                t = r.get("timings", {"model_ms": 0.0, "pose_ms": 0.0})
                fh.write(f"{r['id']}\t{t['model_ms']:.3f}\t{t['pose_ms']:.3f}\t"
                         f"{t['model_ms'] + t['pose_ms']:.3f}\n")

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        return cls(d["scenario"], d["seed"], d["estimator"], d["recall_mode"],
                   EvalThresholds.from_dict(d["thresholds"]), d["records"], d["aggregates"])


def _evaluate_star(args):
    return evaluate_pair(*args)


def run_experiment(scenario, seed: int | None = None, workers: int | None = None) -> EvalReport:
    """Evaluate every pair of a scenario (path, dict or :class:`Scenario`)."""
    if isinstance(scenario, (str, Path)):
        sc = Scenario.load(scenario)
    elif isinstance(scenario, dict):
        sc = Scenario.from_dict(scenario)
    else:
        sc = scenario
    if seed is not None:
        sc.seed = int(seed)
    if workers is not None:
        sc.workers = int(workers)
    jobs = [(sc, k) for k in range(len(sc.pairs))]
    if sc.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=sc.workers) as pool:
            records = list(pool.map(_evaluate_star, jobs))   # ordered by pair index
    else:
        records = [evaluate_pair(*job) for job in jobs]
    return EvalReport(sc.name, sc.seed, sc.estimator, sc.recall_mode, sc.thresholds, records,
                      aggregate(records, sc.thresholds, sc.recall_mode))
