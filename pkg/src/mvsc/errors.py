"""Exception hierarchy shared by every module."""


class MVSCError(Exception):
    """Base class for all package errors."""


class ShapeError(MVSCError, ValueError):
    pass


class PreconditionError(MVSCError, ValueError):
    pass


class NumericalError(MVSCError, ArithmeticError):
    pass


class DataError(MVSCError, ValueError):
    pass


class AlignmentError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class ValidationError(DataError):
    pass


class BudgetError(DataError):
    pass


class DivergenceError(MVSCError, RuntimeError):
    def __init__(self, message, view=None, epoch=None, iteration=None):
        super().__init__(message)
        self.view = view
        self.epoch = epoch
        self.iteration = iteration


class ConfigError(MVSCError, ValueError):
    pass


class CheckpointError(MVSCError, ValueError):
    pass
