"""Exception types shared across the package."""


class MentorKDError(Exception):
    """Base class for package errors."""


class ConfigurationError(MentorKDError):
    """A config value is out of bounds, unknown, or missing."""


class DataFormatError(MentorKDError):
    """A serialized artifact (JSONL, checkpoint, CSV) failed validation."""


class DanglingReferenceError(MentorKDError):
    """An annotation or example references a question id that does not exist."""
