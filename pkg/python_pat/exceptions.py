"""
Exception classes for the python_pat reconstruction library.
"""


class PatError(Exception):
    """Base exception class for all reconstruction-related errors."""
    pass


class PatShapeError(PatError):
    """Exception raised when array dimensions or shapes do not agree."""
    pass


class PatDataError(PatError):
    """Exception raised when input values are invalid for an operation."""
    pass


class PatConfigError(PatError):
    """Exception raised when an experiment configuration cannot be parsed or validated."""

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line

    def __str__(self):
        text = super().__str__()
        if self.key:
            text = f"{self.key}: {text}"
        if self.line is not None:
            text = f"line {self.line}: {text}"
        return text


class PatFormatError(PatError):
    """Exception raised when a stored container (weights, raw array) is malformed."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path

    def __str__(self):
        if self.path:
            return f"{self.path}: {super().__str__()}"
        return super().__str__()


class PatTrainingError(PatError):
    """Exception raised when a training or backpropagation step cannot proceed."""
    pass
