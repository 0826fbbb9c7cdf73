#!/usr/bin/env python3
"""Minibatch study of the momentum rank budget.

Runs the alternating optimizer with momentum ranks {8, 16, 32} on the
column-sampled linear task against the dense-projection reference, then
reports how the final-loss gap shrinks as the momentum buffer widens.
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
    "k": 2,
    "eta": 0.1,
    "alpha": 0.75,
    "lambda": 1e-3,
    "steps": 200,
    "seeds": [0, 1, 2, 3, 4],
    "batch": {"mode": "minibatch", "size": 16},
}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out-dir", default="runs/momentum_rank_study")
    args = parser.parse_args()

    ref_dir = os.path.join(args.out_dir, "reference")
    ref_doc = copy.deepcopy(BASE)
    ref_doc["method"] = "svdlora"
    ref_doc["out_dir"] = ref_dir
    run_experiment(ExperimentConfig.from_dict(ref_doc))

    var_dir = os.path.join(args.out_dir, "variants")
    for m_rank in (8, 16, 32):
        doc = copy.deepcopy(BASE)
        doc["momentum_rank"] = m_rank
        doc["out_dir"] = os.path.join(var_dir, f"mrank{m_rank}")
        run_experiment(ExperimentConfig.from_dict(doc))

    report = gap_report(var_dir, ref_dir,
                        os.path.join(args.out_dir, "gap_report.json"))
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
