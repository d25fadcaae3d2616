"""Standalone figure rendering for experiment manifests and trace CSVs."""

__version__ = "0.1.0"

from . import render  # noqa: F401
from .render import FigureSpec  # noqa: F401
