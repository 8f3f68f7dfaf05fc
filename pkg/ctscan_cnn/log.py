"""Logging setup shared by the CLI and scripts."""

import logging
import os
import sys

_FORMAT = "[%(levelname)s] %(name)s: %(message)s"


def setup_logging(verbose: bool = False) -> None:
    """Configure the root logger once; ``CTSCAN_LOG_LEVEL`` overrides the level."""
    level_name = os.getenv("CTSCAN_LOG_LEVEL", "")
    if level_name:
        level = getattr(logging, level_name.upper(), logging.INFO)
    else:
        level = logging.DEBUG if verbose else logging.INFO

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT))
    root.addHandler(handler)
    root.setLevel(level)
