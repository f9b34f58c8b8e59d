"""
Exception hierarchy shared by every cramkit module.
"""

__all__ = [
    'CramError',
    'ShapeError',
    'NumericDomainError',
    'ContractError',
    'InputError',
    'DeterminismError',
    'FormatError',
    'ConfigError',
    'TrainingDivergedError',
    'VerificationError',
]


class CramError(Exception):
    """
    Base class of all toolkit errors.
    """


class ShapeError(CramError):
    pass


class NumericDomainError(CramError):
    """
    Raised when a NaN or Inf enters or leaves a computation.
    """


class ContractError(CramError):
    """
    Raised when a caller violates an operation's precondition.
    """


class InputError(CramError):
    pass


class DeterminismError(CramError):
    pass


class FormatError(CramError):
    """
    Malformed binary input (checkpoint or IDX file).

    Args:
        message (str): What went wrong
        offset (int): Byte offset at which the problem was detected
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = '{} (at byte offset {})'.format(message, offset)
        super().__init__(message)
        self.offset = offset


class ConfigError(CramError):
    """
    Invalid experiment configuration.

    Args:
        message (str): What is wrong with the value
        field (str, optional): Dotted path of the offending field
        path (str, optional): Config file the field came from
    """

    def __init__(self, message, field=None, path=None):
        self.message = message
        self.field = field
        self.path = path
        prefix = ''
        if path:
            prefix += '{}: '.format(path)
        if field:
            prefix += '{}: '.format(field)
        super().__init__(prefix + message)


class TrainingDivergedError(CramError):
    """
    Too many aborted steps in one epoch. Carries the training log so the
    failed run can still be inspected.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class VerificationError(CramError):
    pass
