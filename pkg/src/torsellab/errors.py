"""Exception types shared across the package."""


class TorselError(Exception):
    """Base class for all torsellab errors."""


class ConfigError(TorselError):
    """Bad or inconsistent configuration."""


class ParseError(TorselError):
    """Malformed input file."""


class ValidationError(TorselError):
    """Data violates a model invariant."""


class UnknownAsnError(TorselError):
    """ASN not present in the topology."""


class SelectionError(TorselError):
    """A path-selection algorithm cannot produce a circuit."""


class StarvationError(SelectionError):
    """Filtering left a client with an empty relay set."""


class SimulationError(TorselError):
    """The stream simulator hit an unrecoverable state."""


class DegenerateDataError(TorselError):
    """Dataset unusable for the requested computation (e.g. single class)."""
