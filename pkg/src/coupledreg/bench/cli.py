"""Command line entry point: ``coupledreg {synth,register,solve,eval}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..costs import CostBundle
from ..geometry import read_points, write_points, write_transform
from ..otsolve import SolverConfig, solve_coupled_ot, write_trace
from ..pipeline import MatchConfig, match_clouds
from ..pose import RansacConfig, ransac_register
from .experiment import ScenarioError, run_experiment
from .synth import SynthConfig, generate_pair

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("coupledreg")


class ConfigError(Exception):
    pass


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None


def _load_matrix(path, name):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{name} file not found: {p}")
    return np.loadtxt(p, ndmin=2)


def cmd_synth(args) -> int:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    pair = generate_pair(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_points(out / "source.xyz", pair.source)
    write_points(out / "target.xyz", pair.target)
    write_transform(out / "gt.txt", pair.gt)
    np.savetxt(out / "gt_pairs.tsv", pair.gt_pairs, fmt="%d", delimiter="\t")
    print(json.dumps({"source_points": len(pair.source), "target_points": len(pair.target),
                      "overlap": pair.overlap, "gt_pairs": len(pair.gt_pairs)}, sort_keys=True))
    return EXIT_OK


def cmd_register(args) -> int:
    d = _read_json(args.config)
    try:
        match = MatchConfig.from_dict(d.get("match", {}))
        ransac = RansacConfig(**{**d.get("ransac", {}), **({"seed": args.seed} if args.seed is not None else {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for p in (args.source, args.target):
        if not Path(p).is_file():
            raise ConfigError(f"point file not found: {p}")
    feats = None
    if args.features_source or args.features_target:
        if not (args.features_source and args.features_target):
            raise ConfigError("give feature files for both clouds or for neither")
        feats = (_load_matrix(args.features_source, "feature"), _load_matrix(args.features_target, "feature"))
    elif match.feature_provider == "oracle" or match.overlap_provider == "gt":
        raise ConfigError("register has no ground truth: use feature files or the spectral provider "
                          "with uniform overlap scores")
    src, tgt = read_points(args.source), read_points(args.target)
    result = match_clouds(src, tgt, match, features=feats)
    corr = result.correspondences
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corr.write(out / "correspondences.tsv")
    reg = ransac_register(corr, src, tgt, ransac)
    write_transform(out / "transform.txt", reg.transform)
    print(json.dumps({"correspondences": len(corr), "inliers": int(reg.inliers.sum()),
                      "ransac_iterations": reg.iterations, "failed": bool(reg.failed)}, sort_keys=True))
    return EXIT_RUNTIME if reg.failed else EXIT_OK


def cmd_solve(args) -> int:
    d = _read_json(args.config)
    try:
        cfg = SolverConfig(**d.get("solver", d))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cross = _load_matrix(args.cross, "cross cost")
    n, m = cross.shape
    sp = _load_matrix(args.struct_p, "structure cost")
    sq = _load_matrix(args.struct_q, "structure cost")
    sp = np.zeros((n, n)) if sp is None else sp
    sq = np.zeros((m, m)) if sq is None else sq
    mu_p = np.ones(n) if args.mu_p is None else _load_matrix(args.mu_p, "score").reshape(-1)
    mu_q = np.ones(m) if args.mu_q is None else _load_matrix(args.mu_q, "score").reshape(-1)
    trace = [] if args.trace else None
    gamma = solve_coupled_ot(CostBundle(cross, sp, sq, 0.0), mu_p, mu_q, cfg, trace=trace)
    if args.trace:
        write_trace(args.trace, trace)
    np.savetxt(args.out if args.out else sys.stdout, gamma, fmt="%.17g")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = run_experiment(args.config, seed=args.seed, workers=args.workers)
    if args.out:
        report.write(args.out)
    else:
        sys.stdout.write(report.to_json())
    agg = report.aggregates
    log.info("IR %.4f  FMR %.4f  RR %.4f  failed %d/%d", agg["ir_mean"], agg["fmr"], agg["rr"],
             agg["n_failed"], agg["n_pairs"])
    return EXIT_OK if report.all_processed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coupledreg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--trace", help="write per-iteration solver records (TSV)")

    p = sub.add_parser("synth", help="write a synthetic pair from a SynthConfig JSON")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register two point files")
    common(p)
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--features-source")
    p.add_argument("--features-target")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("solve", help="solve one coupled transport problem from text matrices")
    common(p)
    p.add_argument("--cross", required=True, help="N x M cross cost matrix")
    p.add_argument("--struct-p", help="N x N structure cost (default zeros)")
    p.add_argument("--struct-q", help="M x M structure cost (default zeros)")
    p.add_argument("--mu-p", help="N overlap scores (default ones)")
    p.add_argument("--mu-q", help="M overlap scores (default ones)")
    p.add_argument("--out", help="coupling output file (default stdout)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="run a scenario and write its EvalReport")
    common(p, config_required=True)
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
