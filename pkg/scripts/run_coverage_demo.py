#!/usr/bin/env python3
"""Run the 2-d coverage demo against the bimodal target and emit the
reconstruction grids for the executed trajectory."""

import sys

from kle3.cli import main

if __name__ == "__main__":
    rc = main(["run", "--config", "configs/coverage_demo.json"] + sys.argv[1:])
    if rc == 0:
        rc = main(["reconstruct", "--config", "configs/reconstruct.json"])
    sys.exit(rc)
