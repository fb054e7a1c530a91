"""Exception hierarchy shared by the library, the service, and the CLI.

Exit-code / HTTP mapping: ConfigError -> 2 / 400, NumericError -> 3 / 500,
DataError -> 4 / 400.  Plain ValueError marks a violated call precondition.
"""


class AmortexError(Exception):
    exit_code = 1


class ConfigError(AmortexError):
    """Invalid or inconsistent configuration (bad variant name, shape mismatch,
    unknown config keys, missing parameter fields, insufficient budgets)."""

    exit_code = 2


class NumericError(AmortexError):
    """Numerical failure: non-finite activations, NaN gradients, failed
    matrix decompositions after jitter retries."""

    exit_code = 3


class DataError(AmortexError):
    """Malformed or incomplete input data files."""

    exit_code = 4


class DecompositionError(NumericError):
    """Cholesky factorization failed even after jitter escalation."""
