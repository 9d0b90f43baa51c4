#!/usr/bin/env python3
"""
DisenHCN command-line launcher
"""

import sys

from disenhcn.cli import main

if __name__ == "__main__":
    # Same verbs as `python -m disenhcn`: synth, prepare, train, evaluate, predict, inspect, gradcheck
    sys.exit(main(sys.argv[1:]))
