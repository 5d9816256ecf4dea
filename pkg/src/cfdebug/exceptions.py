"""Error types shared across the toolkit."""


class InputError(ValueError):
    """Malformed input tensor: wrong shape, dtype, or value range."""


class NumericError(RuntimeError):
    """Non-finite values encountered where finite ones are required."""


class UsageError(ValueError):
    """Operation called outside its contract (bad precondition)."""


class FormatError(ValueError):
    """Persisted artifact has an unreadable or mismatched schema."""
