"""Concept-space learning-dynamics laboratory."""

from ._conceptlab import *  # noqa: F401,F403
from ._conceptlab import __version__  # noqa: F401
