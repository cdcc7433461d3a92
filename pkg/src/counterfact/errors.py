"""Exception hierarchy shared by every estimator in the package."""


class CounterfactError(Exception):
    """Base class for all package errors."""


class FormatError(CounterfactError):
    """Malformed input: bad CSV layout, duplicate keys, unknown columns."""


class BalanceError(CounterfactError):
    """The panel is missing one or more (unit, period) cells."""

    def __init__(self, gaps):
        self.gaps = list(gaps)
        shown = ", ".join(f"({u}, {p})" for u, p in self.gaps[:10])
        more = "" if len(self.gaps) <= 10 else f" ... and {len(self.gaps) - 10} more"
        super().__init__(f"unbalanced panel, missing cells: {shown}{more}")


class DomainError(CounterfactError):
    """A value lies outside the domain of a requested transform."""


class SpecError(CounterfactError):
    """A treatment or predictor specification does not fit the panel."""


class ConfigError(CounterfactError):
    """Invalid estimator or run configuration."""


class DegenerateError(CounterfactError):
    """Outcomes carry no variation, so the estimator is undefined."""


class SingularityError(CounterfactError):
    """A linear system is singular for the requested penalty."""


class GridError(CounterfactError):
    """A test-inversion grid does not bracket the confidence set.

    ``grid`` and ``p_values`` hold the evaluated candidates when available,
    so callers can still inspect the (unbounded) accepted set.
    """

    def __init__(self, message, grid=None, p_values=None):
        super().__init__(message)
        self.grid = grid
        self.p_values = p_values


class ConvergenceError(CounterfactError):
    """An iterative solver stopped before meeting its tolerance.

    The last iterate and objective value (or trace) are kept so callers
    can inspect how far the solver got.
    """

    def __init__(self, message, last_iterate=None, objective=None, trace=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.objective = objective
        self.trace = trace
