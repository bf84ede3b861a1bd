#!/usr/bin/env python3
"""
Script entry point for cotlab.

Same commands as the installed ``cotlab`` script, for example:

    python main.py gen-gauss --out data/gauss.csv
    python main.py train --model pcp --dataset data/gauss.csv --evaluate
"""

import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
