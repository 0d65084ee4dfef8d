"""
Main entry point for the PID-Net counting pipeline
Usage: python main.py <synth|augment|train|eval|count|baseline|report> [options]
"""

import sys

from pidcount.cli import run


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
