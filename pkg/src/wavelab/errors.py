"""Exception types shared across the package."""


class WaveLabError(Exception):
    """Base class for all errors raised by wavelab."""


class SizingError(WaveLabError, ValueError):
    """Array or grid sizes are inconsistent with the requested operation."""


class DealiasingError(SizingError):
    """Collocation grid too coarse for an exact cubic projection."""


class BlowUpError(WaveLabError, FloatingPointError):
    """A time step produced non-finite values."""

    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"non-finite state at t={self.time:.6g}")


class ResolutionError(WaveLabError, ValueError):
    """Too few samples for a statistic to be meaningful."""


class FitRefusedError(WaveLabError, ValueError):
    """An order fit was requested with too few conclusive rows."""


class ExpansionDomainError(WaveLabError, ValueError):
    """Slow-manifold amplitude outside the radius where the expansion is valid."""


class TruncationError(WaveLabError, ValueError):
    """Too few modes retained for the terms being assembled."""


class ConfigError(WaveLabError, ValueError):
    """Invalid run configuration."""
