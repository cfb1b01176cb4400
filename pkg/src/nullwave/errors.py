"""Exception hierarchy shared across the package."""


class NullwaveError(Exception):
    """Base class for all package errors."""


# -- geometry -----------------------------------------------------------------

class SingularMetric(NullwaveError):
    """Metric matrix is numerically singular at the requested point."""


class KindMismatch(NullwaveError):
    """Mixed tangent/cotangent arithmetic or pairing."""


class ZeroVector(NullwaveError):
    """Operation requires a nonzero vector."""


class StepOutOfDomain(NullwaveError):
    """Integrated path left the configured coordinate box."""

    def __init__(self, point, message="geodesic left the coordinate box"):
        super().__init__(f"{message}: {point}")
        self.point = point


class ConjugateBeforeT0(NullwaveError):
    """Requested flow-out apex lies at or beyond the first conjugate point."""


# -- nullform -----------------------------------------------------------------

class ConeDegenerate(NullwaveError):
    """Null-cone quadratic has no real root; signature assumption violated."""


class NotANullForm(NullwaveError):
    """Form has a symmetric residual off the metric direction."""

    def __init__(self, residual, index, message="form is not null"):
        super().__init__(f"{message}: worst coefficient {residual:.3e} at {index}")
        self.residual = residual
        self.index = index


class PivotNotFound(NullwaveError):
    """Every symmetric-family coefficient of the metric vanished at the point."""


# -- symbolcalc ---------------------------------------------------------------

class SamplingExhausted(NullwaveError):
    """Rejection sampling failed to produce a valid covector quadruple."""


class DegenerateDenominator(NullwaveError):
    """A pair or triple covector sum is numerically light-like."""

    def __init__(self, indices, value):
        super().__init__(
            f"degenerate denominator for covectors {indices}: |sum|^2 = {value:.3e}")
        self.indices = indices
        self.value = value


class SearchFailed(NullwaveError):
    """Witness search exhausted its attempt budget."""

    def __init__(self, attempts, best):
        super().__init__(
            f"no witness in {attempts} attempts; max normalized |P| seen = {best:.3e}")
        self.attempts = attempts
        self.best = best


# -- wavesolver ---------------------------------------------------------------

class CourantViolation(NullwaveError):
    """Time step too large for the grid and metric."""


class NaNDetected(NullwaveError):
    """Non-finite value appeared during time stepping."""


class DivergenceDetected(NullwaveError):
    """Field norm grew beyond the configured guard."""


class NonContraction(NullwaveError):
    """Fixed-point residual stopped decreasing."""


class CancellationLoss(NullwaveError):
    """Mixed-difference stencil output is below the rounding floor."""


# -- obsets -------------------------------------------------------------------

class EmptySet(NullwaveError):
    """Observation set is empty where a nonempty one is required."""


# -- cli ----------------------------------------------------------------------

class ConfigParseError(NullwaveError):
    """Scenario file is not valid JSON."""


class SchemaError(NullwaveError):
    """Scenario file violates the configuration schema."""


class AssumptionViolated(NullwaveError):
    """Configured nonlinearity fails the null-form classification."""
