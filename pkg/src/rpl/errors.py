"""Exception types shared across the laboratory.

Every failure mode that a caller can act on gets its own class; messages
carry the offending quantity so pipeline logs stay diagnosable.
"""


class RplError(Exception):
    """Base class for all errors raised by this package."""


class UnsupportedCase(RplError):
    """Requested a combination outside the implemented envelope
    (e.g. dimension 2 with stencil order 4, derivative order > 4)."""


class NoGroundState(RplError):
    """Shooting failed to bracket a positive decaying solution."""


class ConvergenceFailure(RplError):
    """An iterative solve (Newton, fixed point) exhausted its budget."""


class InstabilityDetected(RplError):
    """Evidence contradicts the working stability assumptions
    (complex gap eigenvalue, Vakhitov-Kolokolov slope violation)."""


class NegativeKreinSignature(RplError):
    """An internal mode has (sigma_3 xi, xi) <= 0 and cannot be normalized."""


class ClassificationAmbiguous(RplError):
    """A multi-index frequency sits within tolerance of a classification
    boundary; resonance-dependent stages must not proceed."""


class NearResonance(RplError):
    """A coefficient solve was requested at a frequency too close to the
    spectrum of the linearized operator."""


class RecursionOrderViolation(RplError):
    """A profile coefficient was requested before its lower-order inputs
    were solved."""


class SingularFrame(RplError):
    """The Gram matrix of the modulation/projection frame is numerically
    singular."""


class FgrUnresolved(RplError):
    """The limiting-absorption extrapolation or the far-field amplitude
    fit did not converge to the requested tolerance."""


class ModulationFailure(RplError):
    """Modulation decomposition did not converge (state likely outside
    the modulation neighborhood)."""


class ConfigError(RplError):
    """Configuration file is syntactically or semantically invalid."""


class CacheCorrupt(RplError):
    """A cache artifact failed its integrity check."""
