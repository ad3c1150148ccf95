"""
Errors Module
Exception hierarchy shared by every concept_guard module
"""

from typing import Optional


class ConceptGuardError(Exception):
    """Base class for all library errors."""


class ParameterError(ConceptGuardError, ValueError):
    """A scalar parameter is outside its valid range."""


class ShapeError(ConceptGuardError, ValueError):
    """Array dimensions do not agree."""


class DegenerateInputError(ConceptGuardError, ValueError):
    """Input has no usable direction (zero norm, all-zero mix, ...)."""


class DegenerateDatasetError(ConceptGuardError):
    """Training data cannot support the requested objective."""


class BankUnderpopulatedError(ConceptGuardError):
    """The concept bank has no entry of the requested polarity."""


class ConfigError(ConceptGuardError):
    """Unknown or invalid configuration key."""


class InvariantViolation(ConceptGuardError):
    """A harness-level property failed to hold."""


class ArtifactParseError(ConceptGuardError):
    """A persisted artifact (bank, checkpoint, dataset, image) is malformed."""

    def __init__(self, message: str, path: Optional[str] = None,
                 line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ''
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ': '
        elif line_number is not None:
            location = f"line {line_number}: "
        super().__init__(f"{location}{message}")


class PipelineError(ConceptGuardError):
    """
    Structured diagnostic raised when any stage of the pipeline fails.

    Attributes:
        stage: Name of the failing stage (score, generate, localize, redact)
        prompt_id: Identifier of the prompt being processed, if known
        cause: The underlying exception
    """

    def __init__(self, stage: str, cause: Exception, prompt_id: Optional[str] = None):
        self.stage = stage
        self.prompt_id = prompt_id
        self.cause = cause
        subject = f" for prompt {prompt_id}" if prompt_id else ''
        super().__init__(f"{stage} stage failed{subject}: {type(cause).__name__}: {cause}")

    def to_dict(self) -> dict:
        return {
            'error': 'PipelineError',
            'stage': self.stage,
            'prompt_id': self.prompt_id,
            'cause': type(self.cause).__name__,
            'message': str(self.cause),
        }
