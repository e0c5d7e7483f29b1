"""Exception types shared across the package."""


class DistDPError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DistDPError, ValueError):
    pass


class InvalidBudget(DistDPError, ValueError):
    pass


class InsufficientClients(DistDPError, ValueError):
    pass


class InvalidThreshold(DistDPError, ValueError):
    pass


class ConfigError(DistDPError, ValueError):
    pass


class DuplicateClient(DistDPError):
    pass


class TooManyDropouts(DistDPError):
    """Raised when more than T clients are missing from a round.

    The noise calibration only holds while at most T clients drop out or
    collude, so the round has to be aborted.
    """

    def __init__(self, dropped, tolerance):
        self.dropped = frozenset(dropped)
        self.tolerance = tolerance
        super().__init__(
            f"{len(self.dropped)} clients dropped, tolerance is {tolerance}: "
            f"{sorted(self.dropped)}"
        )


class InconsistentPartials(DistDPError):
    pass


class NotPositiveDefinite(DistDPError, ValueError):
    pass


class ChannelClosed(DistDPError):
    pass


class FaultInjected(DistDPError):
    """A scripted fault stopped the sending party."""


class Timeout(DistDPError):
    pass


class AuthenticationError(DistDPError):
    pass
