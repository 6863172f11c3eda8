class InputError(ValueError):
    """Raised when an operation is handed arguments that violate its contract."""
