"""
Entry point for the metastable layer toolkit.

    python main.py <subcommand> [options]

Subcommands: validate-model, profile, manifold, simulate, reduce, equilibrium,
spectrum, compare, sweep, plot. Exit codes: 0 pass, 1 usage/config error,
2 numerical failure, 3 acceptance-threshold failure.
"""
import sys

from metastable.handlers.cli import main


if __name__ == "__main__":
    sys.exit(main())
