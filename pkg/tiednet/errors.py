"""Exception hierarchy shared by every tiednet module."""


class TiedNetError(Exception):
    """Base class for all errors raised by tiednet."""


class ShapeError(TiedNetError, ValueError):
    """Tensor extents are incompatible with an operation or layer."""


class RankError(ShapeError):
    """A tensor has the wrong number of dimensions."""


class DTypeError(TiedNetError, TypeError):
    """Operands carry different compute dtypes."""


class NumericError(TiedNetError, ArithmeticError):
    """A computation produced non-finite values."""


class ContractError(TiedNetError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class LabelIndexError(TiedNetError, IndexError):
    """A class label lies outside [0, num_classes)."""


class ConfigError(TiedNetError, ValueError):
    """A model configuration could not be parsed or validated."""


class ConfigParseError(ConfigError):
    """The configuration document is not well-formed JSON."""

    def __init__(self, message, offset):
        super().__init__(message)
        # Byte offset into the UTF-8 document.
        self.offset = offset


class ConfigValidationError(ConfigError):
    """A configuration field violates an invariant."""

    def __init__(self, message, field):
        super().__init__(message)
        self.field = field


class UnknownKeyError(ConfigValidationError):
    """Strict mode: the configuration names a key ModelConfig lacks."""


class BuildError(TiedNetError, ValueError):
    """A valid configuration cannot be turned into a model."""


class TyingError(BuildError):
    """Transpose tying is impossible for the requested shapes."""


class CheckpointError(TiedNetError, IOError):
    """Base class for checkpoint persistence failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a tiednet checkpoint (bad magic or version)."""


class CheckpointIntegrityError(CheckpointError):
    """The checkpoint is truncated or its records are inconsistent."""


class TrainingDivergedError(TiedNetError, ArithmeticError):
    """The training loss became non-finite."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
