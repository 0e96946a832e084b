# clims/exceptions.py
"""
Error types. The validation family maps to CLI exit code 1, everything else to 2.
"""


class ClimsError(Exception):
    """Base class for every error raised by the package."""


# ────────────────────────────────
# Validation family (bad input)
# ────────────────────────────────
class ClimsValidationError(ClimsError, ValueError):
    pass


class ConfigError(ClimsValidationError):
    pass


class ShapeError(ClimsValidationError):
    pass


class PromptBookError(ClimsValidationError):
    pass


class DatasetError(ClimsValidationError):
    pass


class SceneSpecError(ClimsValidationError):
    pass


class MatcherError(ClimsValidationError):
    pass


# ────────────────────────────────
# Runtime family
# ────────────────────────────────
class ClimsRuntimeError(ClimsError, RuntimeError):
    pass


class CheckpointError(ClimsRuntimeError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DatasetIOError(ClimsRuntimeError):
    pass


class ModelNotReadyError(ClimsRuntimeError):
    pass


class NonFiniteLossError(ClimsRuntimeError):
    """Raised when the training objective stops being finite.

    `diagnostics` carries batch indices, the loss breakdown and the learning rate.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigHashMismatchWarning(UserWarning):
    pass
