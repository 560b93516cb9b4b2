"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Input violates a documented precondition or file-format contract."""


class DegenerateDataError(ValidationError):
    """Data is too degenerate for the requested operation (e.g. singular Hessian)."""
