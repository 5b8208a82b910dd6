"""Synthetic benchmark: scene pairs, metrics, scenario runner and CLI."""

from .experiment import EvalReport, Scenario, ScenarioError, run_experiment
from .metrics import EvalThresholds, feature_matching_recall, inlier_ratio, registration_recall
from .synth import SynthConfig, SynthPair, generate_pair, make_base

__all__ = [
    "EvalReport", "EvalThresholds", "Scenario", "ScenarioError", "SynthConfig", "SynthPair",
    "feature_matching_recall", "generate_pair", "inlier_ratio", "make_base", "registration_recall",
    "run_experiment",
]
