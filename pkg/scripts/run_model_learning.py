#!/usr/bin/env python3
"""Run the quadcopter exploration-for-model-learning protocol and write the
metrics table (20 repetitions per method by default; long)."""

import sys

from kle3.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", "--config", "configs/model_learning.json"] + sys.argv[1:]))
