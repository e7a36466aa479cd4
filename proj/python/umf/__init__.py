"""Unified motion flow: pyramid prior, reaction flow and the toy benchmark."""

from ._umf import *  # noqa: F401,F403
from ._umf import __version__  # noqa: F401
