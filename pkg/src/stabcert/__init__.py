"""Stability certificates for perturbed linear time-varying systems.

The package computes explicit exponential envelopes (and practical-stability
balls) for ``x' = A0(t) x + eps F(t) x + h(t, x, eps)`` and checks them
against numerically integrated trajectories.
"""

__version__ = "0.1.0"

from .errors import HypothesisError, NumericalError, StabcertError, ValidationError  # noqa: E402

__all__ = ["__version__", "StabcertError", "ValidationError", "HypothesisError", "NumericalError"]
