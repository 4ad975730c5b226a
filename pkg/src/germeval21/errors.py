"""Exception classes shared across the harness.

The CLI maps these onto exit codes: parse/validation/configuration
problems exit 2, run failures exit 3.
"""


class CorpusParseError(Exception):
    """A delimited input file is structurally broken (wrong column count etc.)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(Exception):
    """Input data violates a documented invariant (duplicate ids, bad label cells, ...)."""


class ConfigurationError(Exception):
    """A backbone, tokenizer, or config resource is missing, corrupt, or inconsistent."""


class RunFailure(Exception):
    """A training or inference run aborted (diverged loss, missing model, ...)."""
