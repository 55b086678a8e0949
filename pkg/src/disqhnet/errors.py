"""Exception hierarchy shared by every module of the package."""


class DisqError(Exception):
    """Base class for all package errors."""


class ShapeError(DisqError, ValueError):
    pass


class DomainError(DisqError, ValueError):
    pass


class NumericsError(DisqError, ArithmeticError):
    pass


class InitError(DisqError, ValueError):
    pass


class ModeError(DisqError, RuntimeError):
    pass


class FormatError(DisqError, ValueError):
    pass


class ConfigError(DisqError, ValueError):
    pass


class IncompleteGameError(DisqError, KeyError):
    pass


class NormalizationError(DisqError, ValueError):
    pass
