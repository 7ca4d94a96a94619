"""Exception hierarchy.  The CLI maps ``NumericError`` to exit code 2 and
every other ``S2TPVError`` to exit code 1."""


class S2TPVError(Exception):
    pass


class DimensionError(S2TPVError, ValueError):
    pass


class NumericError(S2TPVError, ArithmeticError):
    pass


class GeometryError(S2TPVError, ValueError):
    pass


class ConfigError(S2TPVError, ValueError):
    pass


class WiringError(S2TPVError, ValueError):
    """Inputs that do not fit together (missing value map, count mismatch)."""


class LabelError(S2TPVError, ValueError):
    pass


class RangeError(S2TPVError, IndexError):
    pass
