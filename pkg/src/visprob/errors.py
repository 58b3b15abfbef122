"""Exception hierarchy shared across the package."""


class VisprobError(Exception):
    """Base class for all errors raised by this package."""


# --- program text diagnostics -------------------------------------------------

class ProgramError(VisprobError):
    """A diagnostic tied to a location in program source text."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def __str__(self) -> str:
        if self.line:
            return f"line {self.line}, col {self.col}: {self.message}"
        return self.message


class ProgramSyntaxError(ProgramError):
    pass


class UnknownModuleError(ProgramError):
    pass


class DuplicateAssignmentError(ProgramError):
    pass


class UseBeforeDefineError(ProgramError):
    pass


class MissingResultError(ProgramError):
    pass


class BadArgumentError(ProgramError):
    """Unknown, missing, or wrongly-shaped module argument."""


# --- EVAL expression errors ---------------------------------------------------

class EvalSyntaxError(VisprobError):
    pass


class UnboundVariableError(VisprobError):
    pass


class TypeMismatchError(VisprobError):
    pass


class NonBooleanTruthyError(VisprobError):
    pass


# --- inference errors ---------------------------------------------------------

class SupportExplosionError(VisprobError):
    """Joint support exceeds the configured cap; exact enumeration refused."""


class ModuleFailureError(VisprobError):
    """A perception module could not produce a distribution for its inputs."""


class OutOfVocabularyError(ModuleFailureError):
    pass


class UnknownTemplateError(ModuleFailureError):
    pass


class CycleDetectedError(VisprobError):
    """Internal invariant violation: the compiled graph is not a DAG."""


# --- autodiff errors ----------------------------------------------------------

class NonFiniteValueError(VisprobError):
    pass


class NonFiniteGradientError(VisprobError):
    pass


class ShapeMismatchError(VisprobError):
    pass


# --- training / data errors ---------------------------------------------------

class LabelNotInSupportError(VisprobError):
    pass


class ExhaustedResamplingError(VisprobError):
    pass


class TruthAccessError(VisprobError):
    """Ground-truth intermediate values were requested inside a training step."""


class ConfigError(VisprobError):
    """Invalid or unknown configuration keys/values."""
