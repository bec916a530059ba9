"""
Exception hierarchy for arch-adapt.

Every error carries the exit code the CLI reports for its family:
usage errors exit 2, data errors exit 3 and oracle failures exit 4.
"""


class AdaptError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class UsageError(AdaptError):
    exit_code = 2


class ConfigViolation(UsageError, ValueError):
    """A configuration value breaks a documented invariant."""


class DataError(AdaptError, ValueError):
    exit_code = 3


class InvalidGene(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SpaceMismatch(DataError):
    pass


class PoolExhausted(DataError):
    pass


class InsufficientCandidates(DataError):
    pass


class SingularKernel(DataError, ArithmeticError):
    """Kernel matrix could not be factorized even after jitter escalation."""


class EmptyTrace(DataError):
    pass


class MalformedRecord(DataError):
    """A record in a text artifact could not be parsed."""

    def __init__(self, line, reason, path=None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {reason}")


class MissingOperator(DataError, LookupError):
    """One or more operators of an architecture are absent from the LUT."""

    def __init__(self, keys):
        self.keys = list(keys)
        preview = "; ".join(str(k) for k in self.keys[:5])
        more = f" (+{len(self.keys) - 5} more)" if len(self.keys) > 5 else ""
        super().__init__(f"{len(self.keys)} operator(s) missing from LUT: {preview}{more}")


class OracleFailure(AdaptError):
    """An evaluation oracle failed for a specific gene."""

    exit_code = 4

    def __init__(self, gene, reason):
        self.gene = gene
        self.reason = reason
        super().__init__(f"oracle failed for gene {gene}: {reason}")


class InfeasibleSpaceWarning(UserWarning):
    """No evaluated architecture satisfied the resource constraint."""
