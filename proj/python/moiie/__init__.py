"""Bimodal toy transformer with intra- and inter-modality expert routing."""

from ._moiie import *  # noqa: F401,F403
from ._moiie import __version__  # noqa: F401
