#!/usr/bin/env python3
"""Run the four-method Bayesian-optimization comparison (10 paired trials)."""

import sys

from kle3.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", "--config", "configs/bayesopt.json"] + sys.argv[1:]))
