"""Run a benchmark scenario and read its report, as ``coupledreg eval`` does."""

import json
import sys
from pathlib import Path

from coupledreg.bench.experiment import run_experiment

root = Path(__file__).resolve().parent.parent
scenario = json.loads((root / "scenarios" / "clean.json").read_text())
scenario["generate"]["count"] = int(sys.argv[1]) if len(sys.argv) > 1 else 4

report = run_experiment(scenario)
for rec in report.records:
    print(f"{rec['id']}: IR {rec['ir']:.3f}  RMSE {rec['rmse']:.2e}  RRE {rec['rre']:.2e}")
print(json.dumps(report.aggregates, indent=2, sort_keys=True))
