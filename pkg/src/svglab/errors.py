"""Exception hierarchy. The CLI maps each family to an exit category."""


class SvgLabError(Exception):
    category = "contract"


class ConfigError(SvgLabError, ValueError):
    category = "config"


class ShapeError(SvgLabError, ValueError):
    category = "config"


class UsageError(SvgLabError, RuntimeError):
    category = "contract"


class NumericError(SvgLabError, FloatingPointError):
    category = "numeric"


class ContractError(SvgLabError, RuntimeError):
    """Pipeline-order or frozen-parameter violation."""

    category = "contract"


class FormatError(SvgLabError, IOError):
    category = "io"


class TrainingDivergedError(NumericError):
    pass
