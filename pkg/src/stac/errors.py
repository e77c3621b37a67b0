"""Exception types shared across the package."""


class StacError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(StacError):
    pass


class UnknownLevel(StacError):
    pass


class BadMagic(StacError):
    pass


class DigestMismatch(StacError):
    pass


class TruncatedStream(StacError):
    pass


class RegionOutOfBounds(StacError):
    pass


class EmptyCorpus(StacError):
    pass


class EmptyLadder(StacError):
    pass


class Unsatisfiable(StacError):
    pass


class NonDivisible(StacError):
    pass


class ChainMismatch(StacError):
    pass


class FeedbackMissing(StacError):
    pass


class UnknownKeyframe(StacError):
    pass


class OracleFailure(StacError):
    pass


class ProtocolError(StacError):
    pass


class LinkLost(StacError):
    pass


class ConfigError(StacError):
    pass
