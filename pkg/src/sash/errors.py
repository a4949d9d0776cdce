"""Exception hierarchy shared by the aggregation protocols."""


class SashError(Exception):
    """Base class for protocol-level failures."""


class ConfigError(SashError, ValueError):
    """A parameter set violates its invariants."""


class UnrecoverableRoundError(SashError):
    """Too few parties remain online to finish the round."""


class NoSurvivorsError(UnrecoverableRoundError):
    """The surviving set is empty; there is nothing to aggregate."""


class CorruptionError(SashError):
    """Reconstructed or demasked values are inconsistent with the protocol."""


class InvalidPublicKeyError(SashError, ValueError):
    """A peer advertised an identity, off-curve or malformed public element."""


class DivergenceError(SashError):
    """Local training produced a non-finite loss or parameter."""
