"""Exception hierarchy shared by every module."""


class TransMIAError(Exception):
    """Base class for all errors raised by this package."""


class RejectedInputError(TransMIAError, ValueError):
    """An argument violates an operation's precondition."""


class RejectedSplitError(RejectedInputError):
    """A split index or split-size tuple cannot be honoured."""


class RejectedPlanError(RejectedInputError):
    """A transfer or shadow plan is inconsistent (seam mismatch, pool too small, ...)."""


class ParseError(TransMIAError, ValueError):
    """A serialized blob or input file is malformed."""


class VersionError(ParseError):
    """A serialized blob carries a format version this build cannot read."""


class IntegrityError(TransMIAError, ValueError):
    """Input data violates a uniqueness or consistency rule."""


class ThresholdUndefinedError(TransMIAError, KeyError):
    """No shadow record exists for a class, so no threshold can be chosen."""


class UncoveredClassError(TransMIAError, KeyError):
    """The adversary has no model or threshold for the queried class."""


class ConfigError(TransMIAError, ValueError):
    """Configuration validation failed; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
