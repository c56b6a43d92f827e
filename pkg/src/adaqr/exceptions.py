"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class AdaqrError(Exception):
    """Base class for all package-specific errors."""


class DomainError(AdaqrError, ValueError):
    """An argument lies outside its mathematical domain (e.g. tau not in (0,1))."""


class ContractError(AdaqrError, ValueError):
    """Inputs violate a structural contract (shapes, ordering, alignment)."""


class DataFormatError(AdaqrError, ValueError):
    """A data file does not conform to the expected schema.

    ``details`` optionally carries (row, column, message) triples for
    reporting; the message embeds the first few.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = list(details) if details else []


class RankError(AdaqrError, ValueError):
    """A design matrix is rank deficient beyond what column dropping can fix."""


class ConvergenceError(AdaqrError, RuntimeError):
    """An iterative procedure exhausted its iteration budget."""


class UnboundedError(AdaqrError, RuntimeError):
    """The LP relaxation is unbounded; indicates corrupt inputs."""


class StageError(AdaqrError, RuntimeError):
    """A pipeline stage failed; wraps the original error with stage context."""

    def __init__(self, stage, original):
        super().__init__(f"stage '{stage}' failed: {original}")
        self.stage = stage
        self.original = original
