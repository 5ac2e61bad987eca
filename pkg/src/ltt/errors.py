"""Exception types shared across the package."""


class LttError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(LttError):
    """An operation was called outside its documented preconditions."""


class TrajectoryAbandoned(LttError):
    """A pass exceeded its action budget before the root constituent closed."""

    def __init__(self, side: str, actions_taken: int, budget: int):
        self.side = side
        self.actions_taken = actions_taken
        self.budget = budget
        super().__init__(
            f"{side} pass abandoned after {actions_taken} actions (budget {budget})"
        )


class CorpusError(LttError):
    """A parallel corpus file is malformed or inconsistent."""


class CheckpointError(LttError):
    """A checkpoint file is missing, corrupt, or shape-incompatible."""
