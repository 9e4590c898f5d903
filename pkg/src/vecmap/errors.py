"""Exception types shared across the package."""


class VecmapError(Exception):
    pass


class DimensionError(VecmapError, ValueError):
    pass


class ContractError(VecmapError, RuntimeError):
    pass


class ConfigError(VecmapError, ValueError):
    pass


class DegenerateGeometryError(VecmapError, ValueError):
    pass


class NumericError(VecmapError, ArithmeticError):
    pass


class FormatError(VecmapError, ValueError):
    pass
