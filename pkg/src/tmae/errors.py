"""Exception hierarchy shared by all tmae modules.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError and
MetricError -> 2, NumericsError -> 3.
"""

from __future__ import annotations


class TmaeError(Exception):
    """Base class for all tmae errors."""


class ConfigError(TmaeError):
    """Bad configuration file, unknown key, or invalid CLI usage."""


class DataError(TmaeError):
    """Precondition failure on input data."""


class MetricError(TmaeError):
    """Precondition failure during metric computation."""


class NumericsError(TmaeError):
    """Non-finite values or training divergence."""


# --- data ---------------------------------------------------------------

class MissingFile(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"manifest row {row}: {reason}")
        self.row = row
        self.reason = reason


class EmptyManifest(DataError):
    pass


class WindowOutOfRange(DataError):
    pass


class TooFewSourceFrames(DataError):
    pass


class InvalidSpec(DataError):
    pass


class NoPhaseInfo(DataError):
    """No phase annotation available; callers fall back to random starts."""


class IoError(DataError):
    pass


# --- tokenizer / masking -------------------------------------------------

class IndivisibleDimensions(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class InvalidRatio(DataError):
    pass


# --- losses ---------------------------------------------------------------

class EmptyMaskSet(DataError):
    pass


class EmptyFrame(DataError):
    pass


class DegenerateNorm(NumericsError):
    pass


class TooFewFrames(DataError):
    pass


# --- model / train --------------------------------------------------------

class NonFiniteActivation(NumericsError):
    pass


class NonFiniteGradient(NumericsError):
    pass


class DivergenceDetected(NumericsError):
    pass


class IncompatibleCheckpoint(DataError):
    pass


# --- eval -------------------------------------------------------------

class OutOfRange(DataError):
    pass


class LengthMismatch(MetricError):
    pass


class SingleClassOnly(MetricError):
    pass
