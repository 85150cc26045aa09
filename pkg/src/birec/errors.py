"""Exception taxonomy shared across the package.

The CLI maps UsageError (and argparse failures) to exit code 2 and every
other BirecError to exit code 1.
"""


class BirecError(Exception):
    """Base class for all package errors."""


class UsageError(BirecError, ValueError):
    """Caller violated a precondition (bad arguments, mismatched shapes)."""


class DataError(BirecError, ValueError):
    """Data integrity violation (non-finite values, malformed files)."""


class GvolError(DataError):
    """Malformed GVOL/GPRJ stream; message names the offending field."""


class NumericalError(BirecError, ArithmeticError):
    """Optimization produced a non-finite quantity; message names the term."""
