"""Exception types shared across the toolkit.

Argument errors (bad shapes, out-of-range values, impossible requests) raise
plain ValueError; everything that can fail for an external reason gets a
dedicated class so callers can tell protocol bugs from I/O from math blowups.
"""


class QuerypatchError(Exception):
    """Base class for toolkit-specific failures."""


class FormatError(QuerypatchError):
    """A file does not follow its declared binary/text format."""


class ConsistencyError(QuerypatchError):
    """Inputs are individually valid but mutually contradictory."""


class GeometryError(QuerypatchError):
    """No valid patch placement exists for the requested geometry."""


class ProtocolError(QuerypatchError):
    """An oracle response violates the classification protocol."""


class ConfigError(QuerypatchError):
    """A remote oracle's handshake disagrees with the local configuration."""


class TransportError(QuerypatchError):
    """A remote oracle could not be reached or died mid-conversation.

    ``request_id`` carries the id of the request in flight, when known.
    """

    def __init__(self, message, request_id=None, status=None):
        super().__init__(message)
        self.request_id = request_id
        self.status = status


class TrainingError(QuerypatchError):
    """Built-in model training diverged or failed to improve."""


class NumericError(QuerypatchError):
    """The objective returned a non-finite value during optimization.

    ``probe`` is the index of the offending probe within one gradient
    estimate (-1 for the base point); ``step`` is set by the outer loop.
    """

    def __init__(self, message, probe=None, step=None):
        super().__init__(message)
        self.probe = probe
        self.step = step


class AttackAborted(QuerypatchError):
    """A patch run died mid-flight (oracle failure, numeric blowup).

    Carries whatever optimization history had accumulated, so partial
    runs stay inspectable.
    """

    def __init__(self, message, history=None, queries_used=0):
        super().__init__(message)
        self.history = history or []
        self.queries_used = queries_used
