#!/usr/bin/env python3
"""Desk-scale study of how the alternating iteration count K affects the
gap to the dense-projection reference on the deterministic linear task.

Runs the alternating optimizer at K in {1, 2, 8} plus the reference,
then emits a gap report with monotonicity verdicts.
"""

import argparse
import copy
import json
import os

from oplora.bench.config import ExperimentConfig
from oplora.bench.report import gap_report
from oplora.bench.runner import run_experiment

BASE = {
    "schema_version": 1,
    "task": {"kind": "linear", "d_out": 120, "d_in": 40, "seed": 7,
             "init": "random"},
    "method": "oplora",
    "rank": 8,
    "eta": 0.5,
    "alpha": 0.0,
    "lambda": 1e-3,
    "steps": 100,
    "seeds": [0, 1, 2, 3, 4],
    "batch": {"mode": "full"},
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out-dir", default="runs/gap_study")
    args = parser.parse_args()

    ref_dir = os.path.join(args.out_dir, "reference")
    ref_doc = copy.deepcopy(BASE)
    ref_doc["method"] = "svdlora"
    ref_doc["out_dir"] = ref_dir
    run_experiment(ExperimentConfig.from_dict(ref_doc))

    var_dir = os.path.join(args.out_dir, "variants")
    for k in (1, 2, 8):
        doc = copy.deepcopy(BASE)
        doc["k"] = k
        doc["out_dir"] = os.path.join(var_dir, f"oplora_k{k}")
        run_experiment(ExperimentConfig.from_dict(doc))

    report = gap_report(var_dir, ref_dir,
                        os.path.join(args.out_dir, "gap_report.json"))
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
