"""Exception types raised across the package.

Numerical failures derive from :class:`NumericalError` so the CLI can map them
to a dedicated exit code; everything else is a :class:`ConfigError` or a plain
``ValueError`` subclass.
"""


class BayesLVError(Exception):
    """Base class for all package errors."""


class ConfigError(BayesLVError, ValueError):
    """Invalid configuration or input data."""


class NumericalError(BayesLVError, ArithmeticError):
    """A numerical routine failed (singular system, factorization, ...)."""


# market data
class MissingColumn(ConfigError):
    pass


class NonPositiveStrike(ConfigError):
    pass


class DuplicateQuote(ConfigError):
    pass


class DegenerateRange(ConfigError):
    pass


class EmptyTrainingSet(ConfigError):
    pass


# K-L prior
class OrderTooLarge(ConfigError):
    pass


class IndexOutOfRange(ConfigError, IndexError):
    pass


class ThresholdUnreachable(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


# FEM
class TooFewNodes(ConfigError):
    pass


class NonPositiveVolatility(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class MaturityNotOnGrid(ConfigError):
    pass


class StrikeOutOfDomain(ConfigError):
    pass


# posterior / sampler
class LengthMismatch(ConfigError):
    pass


class CovarianceFactorizationFailure(NumericalError):
    pass


class EmptyChain(BayesLVError):
    pass


class UnknownCase(ConfigError):
    pass
