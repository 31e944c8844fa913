class UserError(Exception):
    """Bad input or configuration supplied by the operator (CLI exit code 2)."""


class DegenerateDataError(UserError):
    """Data cannot support the requested statistic (e.g. zero distance spread)."""
