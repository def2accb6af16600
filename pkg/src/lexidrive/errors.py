"""Shared exception types."""


class LexidriveError(Exception):
    pass


class ModelValidationError(LexidriveError):
    """Input model or config violates a structural invariant."""


class ConvergenceError(LexidriveError):
    """Iterative solver hit its sweep cap before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractViolationError(LexidriveError):
    """A caller broke an interface precondition (e.g. empty prior set)."""
