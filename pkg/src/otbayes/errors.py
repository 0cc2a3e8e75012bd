"""Exception hierarchy shared by all modules."""


class OTBayesError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteInput(OTBayesError, ValueError):
    pass


class EmptySampleSet(OTBayesError, ValueError):
    pass


class RankDeficient(OTBayesError, ValueError):
    pass


class DegreeTooLow(OTBayesError, ValueError):
    pass


class DidNotConverge(OTBayesError, RuntimeError):
    pass


class InfeasibleRegion(OTBayesError, RuntimeError):
    """Too many rows fell where the map is not orientation preserving.

    The pushed sample set is still available as ``result``, with the offending
    rows flagged.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class InfeasiblePoint(OTBayesError, ValueError):
    pass


class FormatVersionMismatch(OTBayesError, ValueError):
    pass


class CorruptFile(OTBayesError, ValueError):
    pass


class SingularJacobian(OTBayesError, ArithmeticError):
    pass


class FitError(OTBayesError, RuntimeError):
    """Solver stopped before reaching the gradient tolerance.

    ``transport_map`` and ``report`` hold the last accepted iterate so callers
    can still inspect or use it. ``stage`` is set by chained fits.
    """

    def __init__(self, message, transport_map=None, report=None, stage=None):
        super().__init__(message)
        self.transport_map = transport_map
        self.report = report
        self.stage = stage

    def __str__(self):
        base = super().__str__()
        if self.stage is not None:
            return f"stage={self.stage}: {base}"
        return base


class LineSearchStall(FitError):
    pass


class MaxIterationsReached(FitError):
    pass


class TooFewFeasible(OTBayesError, RuntimeError):
    pass


class RequiresNormalizedTarget(OTBayesError, TypeError):
    pass


class UnsupportedPrior(OTBayesError, TypeError):
    pass


class SingleClass(OTBayesError, ValueError):
    pass


class ConfigError(OTBayesError, ValueError):
    """Invalid run configuration. ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
