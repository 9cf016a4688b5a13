"""Run a registered scenario over seeds and export plot-ready curves.

The same thing from the shell:

    shiftalign run config.json --outdir runs --seeds 0,1,2
    shiftalign export runs/estimator-convergence/report.json
"""

import tempfile
from pathlib import Path

from shiftalign.experiments import ExperimentConfig, export_curves, list_scenarios, run_scenario

for name, description in list_scenarios():
    print(f"{name:24s} {description}")

with tempfile.TemporaryDirectory() as tmp:
    report = run_scenario(ExperimentConfig("estimator-convergence", seeds=[0, 1, 2], outdir=tmp))
    agg = report["aggregate"]
    print("KL at epoch 0:", agg["est_kl[epoch=0]"]["median"])
    print("KL at the end:", agg["est_kl[final]"]["median"])
    for path in export_curves(report, Path(tmp) / "curves"):
        print(path.name)
        print(path.read_text().splitlines()[:4])
