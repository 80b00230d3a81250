"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError/FrameParseError -> 3, NumericError -> 4.
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A numeric operation produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """Configuration file or option is invalid."""


class DataError(RuntimeError):
    """Dataset directory, manifest, or frame files are unusable."""


class FrameParseError(DataError):
    """A frame file is malformed; the message names the offending field."""


class CheckpointError(RuntimeError):
    """Checkpoint does not match the model; message lists mismatches."""
