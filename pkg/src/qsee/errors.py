"""Exception hierarchy shared by the simulator modules."""

from __future__ import annotations

import numpy as np


class QseeError(Exception):
    """Base class for all library errors."""


class ConfigurationError(QseeError, ValueError):
    """Invalid parameters, grids or experiment configuration."""


class NonFiniteFieldError(QseeError, FloatingPointError):
    """A norm was requested for a field containing NaN or Inf."""

    def __init__(self, message: str = "non-finite field"):
        super().__init__(message)


class EllipticityError(QseeError, ValueError):
    """A diffusion coefficient fell below its positive floor."""

    def __init__(self, message: str = "ellipticity violated"):
        super().__init__(message)


class SmallnessError(QseeError, ValueError):
    """The smallness condition cannot be met for any positive lambda."""

    def __init__(self, message: str = "smallness condition unsatisfiable"):
        super().__init__(message)


class NoContractionError(QseeError, RuntimeError):
    """Picard iteration exhausted its budget without contracting."""

    def __init__(self, message: str = "no contraction", ratios=None):
        super().__init__(message)
        self.ratios = list(ratios or [])


class SolverError(QseeError, RuntimeError):
    """A linear solve failed."""


class BlowUpSignal(QseeError, ArithmeticError):
    """Raised when a step produces a non-finite state.

    ``last_state`` holds the most recent finite state and ``time`` its time.
    """

    def __init__(self, last_state: np.ndarray, time: float, message: str = "non-finite state"):
        super().__init__(message)
        self.last_state = last_state
        self.time = float(time)
