"""Exception hierarchy; each family maps to a distinct CLI exit status."""


class SpectagError(Exception):
    exit_code = 1


class ConfigError(SpectagError):
    exit_code = 2


class DataError(SpectagError):
    exit_code = 3


class CalibrationError(DataError):
    """White and dark references are too close to divide by."""


class DegenerateRegionError(DataError):
    """A superpixel has no usable pixels left for a statistic."""


class NumericalError(SpectagError):
    exit_code = 4


class ConvergenceError(NumericalError):
    pass
