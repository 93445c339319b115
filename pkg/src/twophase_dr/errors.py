"""Exception types raised by the estimation pipeline.

Every error that calling code is expected to catch and act on has its own
class; generic misuse (wrong types, malformed arguments) raises the usual
built-ins instead.
"""

from __future__ import annotations


class TwoPhaseError(Exception):
    """Base class for all package-specific errors."""


class DimensionMismatch(TwoPhaseError):
    """Row-level covariate dimensions disagree within one dataset."""


class MissingGoldStandard(TwoPhaseError):
    """A validated row (r=1) lacks its gold-standard treatment or outcome."""


class UnvalidatedRow(TwoPhaseError):
    """Gold-standard fields were requested from a row with r=0."""


class EmptyArm(TwoPhaseError):
    """No validated rows carry the requested treatment arm."""


class MissingKappa(TwoPhaseError):
    """A known-kappa mode was requested but kappa values are absent."""


class AllZeroWeights(TwoPhaseError):
    """A weighted fit received no positive weights."""


class DegenerateWeights(TwoPhaseError):
    """Every row of a weighted regression carries negligible weight."""


class NonConvergence(TwoPhaseError):
    """An iterative fit failed to converge.

    Carries the iteration count and final score norm so callers can log the
    failure without re-running the fit.
    """

    def __init__(self, message: str, iterations: int = 0, score_norm: float = float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.score_norm = score_norm


class KTooLarge(TwoPhaseError):
    """Cross-validation was asked for more folds than usable rows."""


class SuperLearnerFailed(TwoPhaseError):
    """Every candidate learner failed to fit."""


class MismatchedLength(TwoPhaseError):
    """Two per-row vectors that must align have different lengths."""


class TooFewRows(TwoPhaseError):
    """An operation requires more rows than the input provides."""


class DegenerateOutcomeRange(TwoPhaseError):
    """The validated outcomes are all identical, so no bounded rescaling exists."""


class GoldUnavailable(TwoPhaseError):
    """Gold-standard estimation was requested on a dataset with unvalidated rows."""
