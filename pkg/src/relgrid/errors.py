"""Exception types shared across relgrid.

Every error carries enough context to name the offending component. The CLI
maps the classes below onto its exit-code contract.
"""


class RelgridError(Exception):
    """Base class for all package errors."""


class InputError(RelgridError):
    """Malformed or inconsistent input data (exit code 2)."""


class CycleDetected(InputError):
    pass


class Disconnected(InputError):
    pass


class DuplicateLineToBus(InputError):
    pass


class MissingSubstation(InputError):
    pass


class UnknownBus(InputError):
    pass


class UnknownDerBus(InputError):
    pass


class UnknownComponent(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class EmptyProfile(InputError):
    pass


class NonPositiveMax(InputError):
    pass


class TemperatureOutOfRange(InputError):
    pass


class DegenerateCovariate(InputError):
    pass


class AllOneClass(InputError):
    pass


class AlreadyReformulated(RelgridError):
    pass


class SolverError(RelgridError):
    """Solver failure (exit code 1)."""


class Infeasible(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


class NodeLimitNoIncumbent(SolverError):
    pass


class SubproblemInfeasible(SolverError):
    def __init__(self, msg, iterate=None):
        super().__init__(msg)
        self.iterate = iterate


class IterationLimit(RelgridError):
    """Iteration cap reached (exit code 3). Carries the best iterate found."""

    def __init__(self, msg, solution=None, trace=None):
        super().__init__(msg)
        self.solution = solution
        self.trace = trace


class Separation(RelgridError):
    pass


class NoConvergence(RelgridError):
    pass


class DivergentTrajectories(RelgridError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}
