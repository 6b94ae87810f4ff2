"""Entropy-gated broadcast mixture-of-experts laboratory."""

from ._gwmoe import *  # noqa: F401,F403
from ._gwmoe import __doc__  # noqa: F401
