"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable exit-code contract (1 usage/config, 2 data, 3 numerical).
"""


class ProsodyError(Exception):
    exit_code = 2


class ConfigError(ProsodyError, ValueError):
    exit_code = 1


class DataError(ProsodyError, ValueError):
    exit_code = 2


class EmptyInputError(DataError):
    pass


class FormatError(DataError):
    pass


class ShapeError(DataError):
    pass


class NumericalError(ProsodyError, ArithmeticError):
    exit_code = 3


class StateError(ProsodyError, RuntimeError):
    exit_code = 1
