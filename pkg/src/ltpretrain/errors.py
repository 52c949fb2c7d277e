"""Exception types shared across the package."""


class LTPretrainError(Exception):
    """Base class for all package errors."""


class ManifestFormatError(LTPretrainError):
    """A manifest file could not be parsed."""

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class ManifestValidationError(LTPretrainError):
    """A manifest parsed but violates a structural invariant."""

    def __init__(self, message, offending_ids=()):
        super().__init__(message)
        self.offending_ids = tuple(offending_ids)


class ConfigurationError(LTPretrainError):
    """Invalid configuration values or unknown configuration keys."""


class DomainError(LTPretrainError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ContractError(LTPretrainError, ValueError):
    """A precondition on tensor shapes or normalization was violated."""


class EmptyProposalsError(LTPretrainError):
    """No proposal survived the visibility filter after all retries."""


class CheckpointError(LTPretrainError):
    """A checkpoint is incomplete, corrupted or incompatible."""

    def __init__(self, message, tensor_name=None):
        if tensor_name is not None:
            message = f"{message} [tensor: {tensor_name}]"
        super().__init__(message)
        self.tensor_name = tensor_name


class NonFiniteLossError(LTPretrainError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, image_ids=(), dump_path=None):
        super().__init__(message)
        self.image_ids = tuple(image_ids)
        self.dump_path = dump_path
