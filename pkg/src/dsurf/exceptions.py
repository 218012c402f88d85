"""Exception types shared across the package."""


class DsurfError(Exception):
    """Base class for package errors."""


class ValidationError(DsurfError):
    """Input data or configuration failed validation.

    Carries every problem found, not just the first, so callers can
    report them all at once.
    """

    def __init__(self, issues):
        if isinstance(issues, str):
            issues = [issues]
        self.issues = [str(s) for s in issues]
        super().__init__("; ".join(self.issues))


class ConfigError(ValidationError):
    """Malformed or incomplete run configuration."""


class NumericalError(DsurfError):
    """A numerical routine failed to converge or produced non-finite values."""
