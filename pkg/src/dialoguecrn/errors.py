"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class EmptyInputError(ValueError):
    """A sequence, utterance or split that must be non-empty was empty."""


class EmptySupportError(ValueError):
    """A masked normalization had no unmasked positions."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, repeated backward, ...)."""


class ProbeError(ArithmeticError):
    """A finite-difference probe produced a non-finite value."""


class CorpusError(ValueError):
    """Base class for corpus and embedding file problems."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(CorpusError):
    pass


class SchemaError(CorpusError):
    pass


class GenerationError(ValueError):
    """Synthetic corpus parameters cannot satisfy the requested structure."""


class PartitionError(ValueError):
    pass


class WrongHeadError(ValueError):
    """A loss was requested for a head the model does not have."""


class OptimizerError(RuntimeError):
    pass


class NonFiniteLossError(ArithmeticError):
    pass


class CheckpointFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass
