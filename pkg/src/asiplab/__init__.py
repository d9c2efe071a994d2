"""Desk-scale spectral lab for almost sure invariance principles.

Subpackages cover generative process models, perturbed-operator spectral
machinery, limiting covariances, block-independence checks, the triadic
Cantor block schedule, a constructive coupling toolbox, and a Monte Carlo
validation suite, all wired together by the ``asiplab`` CLI.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    coupling,
    covariance,
    hypothesis_h,
    models,
    schedule,
    spectral,
    validation,
)
