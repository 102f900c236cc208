"""Run the command-line front end with ``python -m flint_tsr``."""

from flint_tsr.cli import main

main()
