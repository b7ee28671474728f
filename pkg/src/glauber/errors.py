"""Exception taxonomy shared by the whole package.

Input and domain violations raise plain ValueError subclasses so callers can
catch broadly; operational failures (capacity, transport, protocol) get their
own types because the CLI maps them to distinct exit codes.
"""


class InputError(ValueError):
    """Malformed argument: length mismatch, bad index, invalid combination."""


class DomainError(ValueError):
    """Argument outside its mathematical domain (e.g. tau <= 0)."""


class CapacityError(RuntimeError):
    """Instance too large for an exact/enumerative computation."""

    def __init__(self, message: str, limit: int | None = None, requested: int | None = None):
        super().__init__(message)
        self.limit = limit
        self.requested = requested


class TransportError(RuntimeError):
    """Remote scorer connection failed, timed out, or died mid-request."""


class ProtocolError(RuntimeError):
    """Remote peer answered with a malformed or inconsistent message."""


class ScoringError(RuntimeError):
    """Remote peer reported an application-level scoring failure."""
