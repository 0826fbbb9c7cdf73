#!/usr/bin/env python3
"""Run the 600 x 200 column-sampled preset (batch 64, eta 0.1,
momentum 0.75, 5 seeds) through the CLI."""

import os
import sys

from oplora.bench.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "full_scale_linear_minibatch.json")

if __name__ == "__main__":
    sys.exit(main(["run", CONFIG] + sys.argv[1:]))
