"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`AeromagError`. The three
intermediate classes map onto CLI exit codes (config 2, data 3, numerical 4).
"""
from __future__ import annotations


class AeromagError(Exception):
    exit_code = 1


class ConfigError(AeromagError, ValueError):
    exit_code = 2


class DataError(AeromagError, ValueError):
    exit_code = 3


class NumericalError(AeromagError, ArithmeticError):
    exit_code = 4


# -- config -----------------------------------------------------------------

class ConfigInvalid(ConfigError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


# -- data -------------------------------------------------------------------

class _LineError(DataError):
    def __init__(self, line, message=""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")


class MalformedRow(_LineError):
    pass


class NonFinite(_LineError):
    pass


class EmptyInput(DataError):
    pass


class TooFewPoints(DataError):
    pass


class HeaderMismatch(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class MaskedInput(DataError):
    pass


class GeorefMismatch(DataError):
    pass


class EmptySolutionSet(DataError):
    pass


class NonpositiveArea(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class CutoffBelowNyquist(DataError):
    pass


# -- numerical --------------------------------------------------------------

class SingularSystem(NumericalError):
    def __init__(self, cell, message="kriging system is singular"):
        self.cell = cell
        super().__init__(f"{message} at cell {cell}")


class RankDeficient(NumericalError):
    pass


class DegenerateWindow(NumericalError):
    pass


class EmptySweep(NumericalError):
    pass


class DegenerateScatter(NumericalError):
    pass


class DegenerateData(NumericalError):
    pass


class DegenerateFeatures(NumericalError):
    pass
