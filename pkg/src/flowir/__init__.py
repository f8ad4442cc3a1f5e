"""Deterministic image-to-intrinsic inverse rendering via flow matching,
with diffusion baselines, a generative-renderer reconstruction loss,
analytic lighting refitting, and a synthetic toy-scene corpus.
"""

__version__ = "0.1.0"

from .model import ConditionId  # noqa: F401
from .scenegen import IntrinsicSet, SceneSpec  # noqa: F401
