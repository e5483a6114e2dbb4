# -*- coding: utf-8 -*-

"""
Launcher of the bimix command line interface, e.g.

    python bin/bimix.py gen-data --out data/synth --seed 0
"""

import sys

from bimix_toolbox.cli import main


if __name__ == "__main__":
    sys.exit(main())
