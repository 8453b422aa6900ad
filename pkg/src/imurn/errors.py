"""Exception types raised by the engine, the theory routines and the harness."""


class ImurnError(Exception):
    """Base class for all package errors."""


class ImmigrationLoopExceeded(ImurnError):
    """Too many consecutive immigration draws within one subject step."""

    def __init__(self, step: int, draws: int, replication: int | None = None):
        self.step = step
        self.draws = draws
        self.replication = replication
        where = f"step {step}" if replication is None else f"replication {replication}, step {step}"
        super().__init__(f"immigration loop exceeded {draws} draws at {where}")


class LedgerMismatch(ImurnError):
    def __init__(self, step: int, max_abs_error: float):
        self.step = step
        self.max_abs_error = max_abs_error
        super().__init__(
            f"ball ledger mismatch first detected after step {step} "
            f"(max abs error {max_abs_error:.3e})"
        )


class SingularSystem(ImurnError):
    """``I - H`` cannot be inverted to working precision."""


class AssumptionViolated(ImurnError):
    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class NonFiniteDerivative(ImurnError):
    pass


class NotDiagonalDesign(ImurnError):
    pass


class DegenerateEigenvalue(ImurnError):
    pass


class NonPositiveFisher(ImurnError):
    pass


class NotUnitRowSumRegime(ImurnError):
    """A scaling check was requested for a design whose H rows do not sum to one."""


class InsufficientReplications(ImurnError):
    pass


class ReplicationError(ImurnError):
    """Wraps an engine error with the index of the failing replication."""

    def __init__(self, replication: int, cause: Exception):
        self.replication = replication
        self.cause = cause
        super().__init__(f"replication {replication}: {cause}")
