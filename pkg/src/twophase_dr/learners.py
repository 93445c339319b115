"""Regression learners, fold construction, and loss-weighted stacking.

All model fitting in the package flows through this module: weighted least
squares, weighted logistic regression with offsets, a saturated cell-mean
learner for discrete covariates, and a cross-validated stacking ensemble over
named candidate specifications.

Candidate specifications are short strings:

    lin, lin_int, lin_poly3       squared-error fits on main effects,
                                  main effects + pairwise interactions,
                                  or main effects + squares + cubes
    logit, logit_int, logit_poly3 Bernoulli fits on the same bases
    cell                          saturated cell means over the distinct
                                  covariate combinations
    sl:lin,lin_int,...            stacking ensemble over a comma-list

Fits are deterministic functions of their inputs; no learner draws random
numbers. Cross-validation splits are supplied by the caller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import exp

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, solve
from scipy.special import expit

from .errors import (
    AllZeroWeights,
    KTooLarge,
    NonConvergence,
    SuperLearnerFailed,
)

BASIS_SPECS = ("raw", "main", "main+interactions", "main+poly3")

# Newton / IRLS controls
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 60
IRLS_MAX_HALVINGS = 30
SEPARATION_PENALTY = 1e-4

# ridge fallback for singular normal equations, scaled by trace(G)/dim
RIDGE_FRACTION = 1e-8

# exponentiated-gradient controls for stacking weights
EG_STEP = 0.1
EG_MAX_ITER = 500
EG_TOL = 1e-10

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LearnerSpec:
    """A named (family, basis) pair."""

    name: str
    family: str  # "linear" | "logistic" | "cell"
    basis: str


_LEARNER_NAMES = {
    "lin": ("linear", "main"),
    "lin_int": ("linear", "main+interactions"),
    "lin_poly3": ("linear", "main+poly3"),
    "logit": ("logistic", "main"),
    "logit_int": ("logistic", "main+interactions"),
    "logit_poly3": ("logistic", "main+poly3"),
    "cell": ("cell", "raw"),
}


def parse_learner(spec: str) -> tuple[LearnerSpec, ...]:
    """Parse a learner string into candidate specs.

    A bare name yields one candidate; ``sl:a,b,c`` yields the listed
    candidates for stacking.
    """
    spec = spec.strip()
    names = [s.strip() for s in spec[3:].split(",")] if spec.startswith("sl:") else [spec]
    out = []
    for name in names:
        if name not in _LEARNER_NAMES:
            raise ValueError(f"unknown learner {name!r}; known: {sorted(_LEARNER_NAMES)}")
        family, basis = _LEARNER_NAMES[name]
        out.append(LearnerSpec(name, family, basis))
    if not out:
        raise ValueError(f"empty learner spec {spec!r}")
    return tuple(out)


# ----------------------------------------------------------------------
# basis expansion
# ----------------------------------------------------------------------


def expand_basis(x: NDArray, spec: str) -> NDArray:
    """Expand raw covariates into the named feature basis (no intercept).

    ``main`` passes covariates through, ``main+interactions`` appends all
    pairwise products x_i * x_j (i < j), ``main+poly3`` appends squares and
    cubes coordinate-wise. ``raw`` is the identity for pre-built designs.
    """
    arr = np.asarray(x, dtype=float)
    vec = arr.ndim == 1
    X = np.atleast_2d(arr)
    if spec in ("raw", "main"):
        out = X
    elif spec == "main+interactions":
        n, p = X.shape
        cols = [X]
        for i in range(p):
            for j in range(i + 1, p):
                cols.append((X[:, i] * X[:, j])[:, None])
        out = np.hstack(cols) if len(cols) > 1 else X
    elif spec == "main+poly3":
        out = np.hstack([X, X**2, X**3])
    else:
        raise ValueError(f"unknown basis spec {spec!r}; known: {BASIS_SPECS}")
    return out[0] if vec else out


class FeatureCache:
    """Memoized basis expansions of one raw covariate matrix."""

    __slots__ = ("raw", "_expanded")

    def __init__(self, raw: NDArray):
        self.raw = np.ascontiguousarray(np.atleast_2d(np.asarray(raw, dtype=float)))
        self._expanded: dict[str, NDArray] = {}

    def get(self, spec: str) -> NDArray:
        if spec not in self._expanded:
            self._expanded[spec] = expand_basis(self.raw, spec)
        return self._expanded[spec]


# ----------------------------------------------------------------------
# predictors
# ----------------------------------------------------------------------


@dataclass
class Predictor:
    """A fitted model that predicts from raw covariates.

    ``coef`` is always [intercept, slopes...] on the raw feature scale of the
    stored basis expansion. Stacked predictors combine component predictions
    (probabilities, for logistic components) with simplex weights.
    """

    kind: str  # "linear" | "logistic" | "stacked" | "cell"
    basis: str = "raw"
    coef: NDArray | None = None
    components: tuple["Predictor", ...] = ()
    weights: NDArray | None = None
    penalized: bool = False
    diagnostics: dict = field(default_factory=dict)
    cells: dict | None = None
    cell_default: float = 0.0

    def predict(self, x: NDArray, offset: NDArray | float | None = None) -> NDArray:
        arr = np.asarray(x, dtype=float)
        vec = arr.ndim == 1
        out = predict_rows(self, FeatureCache(arr), offset=offset)
        return float(out[0]) if vec else out


def predict_rows(
    pred: Predictor,
    cache: FeatureCache,
    rows: NDArray | None = None,
    offset: NDArray | float | None = None,
) -> NDArray:
    """Predict for (a subset of) the cached rows without re-expanding bases."""
    if pred.kind == "stacked":
        out = None
        for w, comp in zip(pred.weights, pred.components):
            part = w * predict_rows(comp, cache, rows, offset)
            out = part if out is None else out + part
        return out
    if pred.kind == "cell":
        raw = cache.raw if rows is None else cache.raw[rows]
        cells = pred.cells
        default = pred.cell_default
        return np.array([cells.get(tuple(row), default) for row in raw])
    F = cache.get(pred.basis)
    if rows is not None:
        F = F[rows]
    lp = F @ pred.coef[1:] + pred.coef[0]
    if pred.kind == "linear":
        if offset is not None:
            raise ValueError("linear predictors do not accept offsets")
        return lp
    if offset is not None:
        lp = lp + offset
    return expit(lp)


# ----------------------------------------------------------------------
# weighted least squares
# ----------------------------------------------------------------------


def _as_design(features: NDArray) -> NDArray:
    """Coerce to (n, d); a 1-d input is read as a single-column design."""
    F = np.asarray(features, dtype=float)
    if F.ndim == 1:
        return F[:, None]
    if F.ndim != 2:
        raise ValueError(f"features must be 1-d or 2-d, got shape {F.shape}")
    return F


def _prep_weights(n: int, weights: NDArray | None) -> NDArray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weights shape {w.shape} does not match {n} rows")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise AllZeroWeights("all regression weights are zero")
    # normalizing to mean one makes every fit invariant to rescaling the weights
    return w * (n / total)

def _standardize(F: NDArray, w: NDArray) -> tuple[NDArray, NDArray, NDArray]:
    wsum = w.sum()
    center = (w @ F) / wsum
    Fc = F - center
    scale = np.sqrt((w @ (Fc * Fc)) / wsum)
    scale[scale < 1e-12] = 1.0
    return Fc / scale, center, scale


def _solve_pd(G: NDArray, b: NDArray) -> tuple[NDArray, bool]:
    """Solve G beta = b for symmetric PD G, with a trace-scaled ridge fallback."""
    d = G.shape[0]
    if d == 0:
        return np.zeros(0), False
    try:
        beta = cho_solve(cho_factor(G, check_finite=False), b, check_finite=False)
        if np.isfinite(beta).all():
            return beta, False
    except np.linalg.LinAlgError:
        pass
    tr = float(np.trace(G))
    lam = RIDGE_FRACTION * (tr / d if tr > 0 else 1.0)
    beta = solve(G + lam * np.eye(d), b, assume_a="pos", check_finite=False)
    return beta, True


def _raw_coef(beta_std: NDArray, alpha_std: float, center: NDArray, scale: NDArray) -> NDArray:
    slopes = beta_std / scale
    return np.concatenate([[alpha_std - slopes @ center], slopes])


def fit_wls(
    features: NDArray,
    outcome: NDArray,
    weights: NDArray | None = None,
    basis: str = "raw",
) -> Predictor:
    """Weighted least squares with an internal intercept.

    Features are standardized internally and the normal equations solved by
    Cholesky; exactly collinear designs fall back to a trace-scaled ridge
    (fraction 1e-8), which leaves fitted values within floating-point slack
    of the least-norm projection.
    """
    F = _as_design(features)
    y = np.asarray(outcome, dtype=float)
    n = F.shape[0]
    if y.shape != (n,):
        raise ValueError(f"outcome shape {y.shape} does not match {n} rows")
    if not (np.isfinite(F).all() and np.isfinite(y).all()):
        raise ValueError("features and outcome must be finite")
    w = _prep_weights(n, weights)
    D, center, scale = _standardize(F, w)
    ybar = (w @ y) / w.sum()
    Dw = D * w[:, None]
    G = Dw.T @ D
    b = Dw.T @ (y - ybar)
    beta, ridged = _solve_pd(G, b)
    return Predictor(
        kind="linear",
        basis=basis,
        coef=_raw_coef(beta, ybar, center, scale),
        diagnostics={"ridge": ridged},
    )


# ----------------------------------------------------------------------
# weighted logistic regression
# ----------------------------------------------------------------------


def _quasi_loglik(y: NDArray, p: NDArray, w: NDArray) -> float:
    p = np.minimum(np.maximum(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
    return float(w @ (y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _newton_logistic(
    X: NDArray,
    y: NDArray,
    w: NDArray,
    offset: NDArray,
    beta0: NDArray,
    penalty: float,
) -> tuple[NDArray, int, float, bool]:
    """Newton with step halving. Returns (beta, iterations, score_norm, converged)."""
    n = X.shape[0]
    beta = beta0.copy()
    lp = offset + X @ beta
    ll = _quasi_loglik(y, expit(lp), w) - 0.5 * penalty * n * (beta @ beta)
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        p = expit(lp)
        grad = X.T @ (w * (y - p)) / n - penalty * beta
        score_norm = float(np.max(np.abs(grad), initial=0.0))
        if score_norm < IRLS_TOL:
            return beta, it - 1, score_norm, True
        hw = w * np.maximum(p * (1.0 - p), PROB_FLOOR)
        H = (X * hw[:, None]).T @ X / n + penalty * np.eye(X.shape[1])
        step, _ = _solve_pd(H, grad)
        scale = 1.0
        for _ in range(IRLS_MAX_HALVINGS + 1):
            cand = beta + scale * step
            lp_cand = offset + X @ cand
            ll_cand = _quasi_loglik(y, expit(lp_cand), w) - 0.5 * penalty * n * (cand @ cand)
            if ll_cand >= ll - 1e-12:
                beta, lp, ll = cand, lp_cand, ll_cand
                break
            scale *= 0.5
        else:
            break  # no improving step in this direction
        if penalty == 0.0 and float(np.max(np.abs(beta), initial=0.0)) > 30.0:
            break  # runaway coefficients: likely separation
    p = expit(offset + X @ beta)
    grad = X.T @ (w * (y - p)) / n - penalty * beta
    return beta, it, float(np.max(np.abs(grad), initial=0.0)), False


def fit_logistic_irls(
    features: NDArray,
    outcome: NDArray,
    weights: NDArray | None = None,
    offset: NDArray | None = None,
    include_intercept: bool = True,
    basis: str = "raw",
    warm_start: Predictor | None = None,
) -> Predictor:
    """Weighted logistic regression by Newton iteration with step halving.

    The outcome may be fractional in [0, 1]; the fit maximizes the weighted
    Bernoulli quasi-log-likelihood with linear predictor offset + F beta.
    Convergence requires the max-abs score of the mean log-likelihood to fall
    under 1e-8. Perfectly separated binary data triggers an L2-penalized
    refit (penalty 1e-4) flagged on the returned predictor, which keeps all
    fitted probabilities strictly inside (0, 1).
    """
    F = _as_design(features)
    y = np.asarray(outcome, dtype=float)
    n = F.shape[0]
    if y.shape != (n,):
        raise ValueError(f"outcome shape {y.shape} does not match {n} rows")
    if not (np.isfinite(F).all() and np.isfinite(y).all()):
        raise ValueError("features and outcome must be finite")
    if ((y < 0) | (y > 1)).any():
        raise ValueError("logistic outcome must lie in [0, 1]")
    w = _prep_weights(n, weights)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != (n,):
        raise ValueError("offset length does not match rows")

    if include_intercept:
        D, center, scale = _standardize(F, w)
    else:
        # scaling only: centering would introduce an implicit intercept
        center = np.zeros(F.shape[1])
        scale = np.sqrt((w @ (F * F)) / w.sum())
        scale[scale < 1e-12] = 1.0
        D = F / scale
    X = np.hstack([np.ones((n, 1)), D]) if include_intercept else D

    beta0 = np.zeros(X.shape[1])
    if warm_start is not None and warm_start.kind == "logistic" and warm_start.coef is not None:
        prev = warm_start.coef
        if prev.shape[0] == F.shape[1] + 1:
            slopes = prev[1:] * scale
            if include_intercept:
                beta0 = np.concatenate([[prev[0] + prev[1:] @ center], slopes])
            else:
                beta0 = slopes

    beta, iters, score_norm, converged = _newton_logistic(X, y, w, off, beta0, 0.0)
    penalized = False
    if not converged:
        binary = bool(np.isin(y, (0.0, 1.0)).all())
        if not binary:
            raise NonConvergence(
                f"logistic fit did not converge in {iters} iterations "
                f"(score norm {score_norm:.3e})",
                iterations=iters,
                score_norm=score_norm,
            )
        beta, iters, score_norm, converged = _newton_logistic(
            X, y, w, off, np.zeros(X.shape[1]), SEPARATION_PENALTY
        )
        penalized = True
        if not converged:
            raise NonConvergence(
                f"penalized logistic fit did not converge in {iters} iterations "
                f"(score norm {score_norm:.3e})",
                iterations=iters,
                score_norm=score_norm,
            )

    if include_intercept:
        coef = _raw_coef(beta[1:], float(beta[0]), center, scale)
    else:
        coef = np.concatenate([[0.0], beta / scale])
    return Predictor(
        kind="logistic",
        basis=basis,
        coef=coef,
        penalized=penalized,
        diagnostics={"iterations": iters, "score_norm": score_norm, "separated": penalized},
    )


# ----------------------------------------------------------------------
# saturated cell means
# ----------------------------------------------------------------------


def fit_cell_means(
    features: NDArray,
    outcome: NDArray,
    weights: NDArray | None = None,
) -> Predictor:
    """Weighted mean of the outcome within each distinct covariate combination.

    Discrete covariates only; a combination unseen at fit time predicts the
    global weighted mean. With a binary outcome the cell mean is the cell
    proportion, so the same learner serves both regression families.
    """
    F = _as_design(features)
    y = np.asarray(outcome, dtype=float)
    w = _prep_weights(F.shape[0], weights)
    _, inverse = np.unique(F, axis=0, return_inverse=True)
    wsum = np.bincount(inverse, weights=w)
    wysum = np.bincount(inverse, weights=w * y)
    default = float((w @ y) / w.sum())
    cells = {}
    for i, key_idx in enumerate(inverse):
        key = tuple(F[i])
        if key not in cells:
            cells[key] = wysum[key_idx] / wsum[key_idx] if wsum[key_idx] > 0 else default
    return Predictor(kind="cell", basis="raw", cells=cells, cell_default=default)


# ----------------------------------------------------------------------
# folds
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    """A K-way partition of row indices."""

    assignment: NDArray
    k: int

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    def heldout(self, fold: int) -> NDArray:
        return np.flatnonzero(self.assignment == fold)

    def train(self, fold: int) -> NDArray:
        return np.flatnonzero(self.assignment != fold)


def make_folds(
    n: int,
    k: int,
    seed: int = 0,
    strata: NDArray | None = None,
) -> FoldAssignment:
    """Deterministic (optionally stratified) K-fold assignment.

    Within every stratum the fold sizes differ by at most one row; the
    round-robin dealing position carries over between strata so total fold
    sizes are balanced as well.
    """
    if k < 2:
        raise KTooLarge(f"need at least 2 folds, got {k}")
    if k > n:
        raise KTooLarge(f"{k} folds requested for {n} rows")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    offset = 0
    if strata is None:
        groups = [np.arange(n)]
    else:
        strata = np.asarray(strata)
        if strata.shape != (n,):
            raise ValueError("strata length does not match n")
        groups = [np.flatnonzero(strata == v) for v in np.unique(strata)]
    for idx in groups:
        perm = idx[rng.permutation(idx.size)]
        assignment[perm] = (offset + np.arange(idx.size)) % k
        offset = (offset + idx.size) % k
    return FoldAssignment(assignment=assignment, k=k)


def dealt_folds(order: NDArray, k: int) -> FoldAssignment:
    """Fold assignment by dealing rows round-robin in the given order.

    ``order`` lists row positions from first to last; the result depends only
    on that ordering, so an ordering derived from row content gives folds
    that are invariant to how the rows happen to be arranged.
    """
    n = order.shape[0]
    if k > n:
        raise KTooLarge(f"{k} folds requested for {n} rows")
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldAssignment(assignment=assignment, k=k)


# ----------------------------------------------------------------------
# stacking
# ----------------------------------------------------------------------


def _fit_candidate(
    spec: LearnerSpec,
    cache: FeatureCache,
    y: NDArray,
    w: NDArray,
    rows: NDArray | None = None,
    warm_start: Predictor | None = None,
) -> Predictor:
    if spec.family == "cell":
        raw = cache.raw if rows is None else cache.raw[rows]
        return fit_cell_means(raw, y if rows is None else y[rows], w if rows is None else w[rows])
    F = cache.get(spec.basis)
    if rows is not None:
        F = F[rows]
        y = y[rows]
        w = w[rows]
    if spec.family == "linear":
        return fit_wls(F, y, w, basis=spec.basis)
    return fit_logistic_irls(F, y, w, basis=spec.basis, warm_start=warm_start)


def _linear_oof(
    cache: FeatureCache,
    spec: LearnerSpec,
    y: NDArray,
    w: NDArray,
    folds: FoldAssignment,
) -> NDArray:
    """Out-of-fold predictions for one linear candidate via gram downdating.

    The full-data normal equations are accumulated once; each fold's training
    system is the full system minus that fold's contribution, so K-fold
    cross-validation of a linear candidate costs about one extra solve per
    fold instead of K full passes over the data.
    """
    F = cache.get(spec.basis)
    D, _, _ = _standardize(F, w)
    n = D.shape[0]
    X = np.hstack([np.ones((n, 1)), D])
    Xw = X * w[:, None]
    G_full = Xw.T @ X
    b_full = Xw.T @ y
    oof = np.empty(n)
    for fold in range(folds.k):
        held = folds.heldout(fold)
        Xh = X[held]
        Xhw = Xw[held]
        G = G_full - Xhw.T @ Xh
        b = b_full - Xhw.T @ y[held]
        beta, _ = _solve_pd(G, b)
        oof[held] = Xh @ beta
    return oof


def _logistic_oof(
    cache: FeatureCache,
    spec: LearnerSpec,
    y: NDArray,
    w: NDArray,
    folds: FoldAssignment,
    warm_start: Predictor | None,
) -> NDArray:
    n = y.shape[0]
    oof = np.empty(n)
    for fold in range(folds.k):
        held = folds.heldout(fold)
        fit = _fit_candidate(spec, cache, y, w, rows=folds.train(fold), warm_start=warm_start)
        oof[held] = predict_rows(fit, cache, held)
    return oof


def _cell_oof(
    cache: FeatureCache,
    y: NDArray,
    w: NDArray,
    folds: FoldAssignment,
) -> NDArray:
    n = y.shape[0]
    oof = np.empty(n)
    for fold in range(folds.k):
        held = folds.heldout(fold)
        fit = _fit_candidate(
            LearnerSpec("cell", "cell", "raw"), cache, y, w, rows=folds.train(fold)
        )
        oof[held] = predict_rows(fit, cache, held)
    return oof


def _cv_loss(P: NDArray, alpha: NDArray, y: NDArray, w: NDArray, loss: str) -> float:
    pred = P @ alpha
    if loss == "squared":
        resid = y - pred
        return float(w @ (resid * resid) / w.sum())
    return -_quasi_loglik(y, pred, w) / w.sum()


def _eg_quadratic(G: NDArray, b: NDArray, cst: float, k: int) -> tuple[NDArray, int, float]:
    """Exponentiated-gradient descent on a @ G @ a - 2 b @ a + cst over the simplex.

    Runs on plain floats; per-iteration numpy dispatch would dominate at the
    menu sizes seen here (k of 3 or 4).
    """
    step2 = -2.0 * EG_STEP
    if k == 3:
        # unrolled: this size is on the critical path of every simulation rep
        g00, g01, g02 = float(G[0, 0]), float(G[0, 1]), float(G[0, 2])
        g11, g12, g22 = float(G[1, 1]), float(G[1, 2]), float(G[2, 2])
        b0, b1, b2 = float(b[0]), float(b[1]), float(b[2])
        a0 = a1 = a2 = 1.0 / 3.0
        ga0 = (g00 * a0 + g01 * a1) + g02 * a2
        ga1 = (g01 * a0 + g11 * a1) + g12 * a2
        ga2 = (g02 * a0 + g12 * a1) + g22 * a2
        prev = cst + a0 * (ga0 - 2.0 * b0) + a1 * (ga1 - 2.0 * b1) + a2 * (ga2 - 2.0 * b2)
        it = 0
        for it in range(1, EG_MAX_ITER + 1):
            z = step2 * (ga0 - b0)
            a0 *= exp(50.0 if z > 50.0 else (-50.0 if z < -50.0 else z))
            z = step2 * (ga1 - b1)
            a1 *= exp(50.0 if z > 50.0 else (-50.0 if z < -50.0 else z))
            z = step2 * (ga2 - b2)
            a2 *= exp(50.0 if z > 50.0 else (-50.0 if z < -50.0 else z))
            total = a0 + a1 + a2
            a0 /= total
            a1 /= total
            a2 /= total
            ga0 = (g00 * a0 + g01 * a1) + g02 * a2
            ga1 = (g01 * a0 + g11 * a1) + g12 * a2
            ga2 = (g02 * a0 + g12 * a1) + g22 * a2
            cur = cst + a0 * (ga0 - 2.0 * b0) + a1 * (ga1 - 2.0 * b1) + a2 * (ga2 - 2.0 * b2)
            done = abs(prev - cur) < EG_TOL
            prev = cur
            if done:
                break
        return np.array([a0, a1, a2]), it, prev
    rows = [list(row) for row in G]
    bl = list(b)
    alpha = [1.0 / k] * k
    ga = [0.0] * k
    prev = cst
    for i in range(k):
        s = 0.0
        row = rows[i]
        for j in range(k):
            s += row[j] * alpha[j]
        ga[i] = s
        prev += alpha[i] * (s - 2.0 * bl[i])
    it = 0
    for it in range(1, EG_MAX_ITER + 1):
        total = 0.0
        for i in range(k):
            z = step2 * (ga[i] - bl[i])
            if z > 50.0:
                z = 50.0
            elif z < -50.0:
                z = -50.0
            alpha[i] *= exp(z)
            total += alpha[i]
        cur = cst
        for i in range(k):
            alpha[i] /= total
        for i in range(k):
            s = 0.0
            row = rows[i]
            for j in range(k):
                s += row[j] * alpha[j]
            ga[i] = s
            cur += alpha[i] * (s - 2.0 * bl[i])
        done = abs(prev - cur) < EG_TOL
        prev = cur
        if done:
            break
    return np.array(alpha), it, prev


def _stack_weights(
    P: NDArray, y: NDArray, w: NDArray, loss: str
) -> tuple[NDArray, int, NDArray]:
    """Simplex weights by exponentiated-gradient descent on the CV loss.

    Returns (weights, iterations, per-candidate vertex losses); the returned
    weights are the better of the descent solution and the best vertex, so
    the ensemble CV loss never exceeds the best single candidate's.
    """
    k = P.shape[1]
    alpha = np.full(k, 1.0 / k)
    wsum = w.sum()
    it = 0
    if loss == "squared":
        # the CV loss is quadratic in alpha, so iterations run on k-vectors
        Pw = P * w[:, None]
        G = (Pw.T @ P) / wsum
        b = (Pw.T @ y) / wsum
        cst = float(w @ (y * y)) / wsum
        vertex = np.diag(G) - 2.0 * b + cst
        alpha, it, final = _eg_quadratic(G, b, cst, k)
    else:
        # clipping the candidate columns once keeps every convex combination
        # inside [floor, 1 - floor], so iterations skip the clip
        Pc = np.minimum(np.maximum(P, PROB_FLOOR), 1.0 - PROB_FLOOR)
        is_binary = bool(((y == 0.0) | (y == 1.0)).all())
        if is_binary:
            # one log per iteration: q is the probability of the observed class
            yb = y == 1.0
            vertex = -(w @ np.log(np.where(yb[:, None], Pc, 1.0 - Pc))) / wsum
            sgnw = np.where(yb, -1.0, 1.0) * w

            def eval_point(a: NDArray) -> tuple[float, NDArray]:
                p = Pc @ a
                q = np.where(yb, p, 1.0 - p)
                cur = -float(w @ np.log(q)) / wsum
                grad = Pc.T @ (sgnw / q) / wsum
                return cur, grad

        else:
            wy = w * y
            w1y = w - wy
            vertex = -(wy @ np.log(Pc) + w1y @ np.log1p(-Pc)) / wsum

            def eval_point(a: NDArray) -> tuple[float, NDArray]:
                p = Pc @ a
                cur = -float(wy @ np.log(p) + w1y @ np.log1p(-p)) / wsum
                grad = Pc.T @ (w * (p - y) / (p * (1.0 - p))) / wsum
                return cur, grad

        prev, grad = eval_point(alpha)
        for it in range(1, EG_MAX_ITER + 1):
            z = -EG_STEP * grad
            np.minimum(z, 50.0, out=z)
            np.maximum(z, -50.0, out=z)
            alpha = alpha * np.exp(z)
            alpha /= alpha.sum()
            cur, grad = eval_point(alpha)
            done = abs(prev - cur) < EG_TOL
            prev = cur
            if done:
                break
        final = prev
    best_vertex = int(np.argmin(vertex))
    if vertex[best_vertex] < final:
        alpha = np.zeros(k)
        alpha[best_vertex] = 1.0
    return alpha, it, vertex


def fit_super_learner(
    candidates,
    x: NDArray,
    outcome: NDArray,
    weights: NDArray | None = None,
    folds: FoldAssignment | None = None,
    loss: str = "squared",
    cache: FeatureCache | None = None,
) -> Predictor:
    """Cross-validated stacking over candidate learner specs.

    Candidate out-of-fold predictions are combined with simplex weights
    minimizing the cross-validated loss ("squared" or "bernoulli"); the
    returned weights are never worse (beyond 1e-9) than the best single
    candidate, because every vertex of the simplex is checked against the
    descent solution. Candidates that fail to fit are dropped with a warning;
    if none survive, SuperLearnerFailed is raised. Components are refit on
    all rows before stacking.
    """
    if loss not in ("squared", "bernoulli"):
        raise ValueError(f"unknown loss {loss!r}")
    specs: list[LearnerSpec] = []
    for cand in candidates:
        if isinstance(cand, LearnerSpec):
            specs.append(cand)
        else:
            specs.extend(parse_learner(cand))
    if not specs:
        raise ValueError("no candidates given")
    cache = cache if cache is not None else FeatureCache(x)
    y = np.asarray(outcome, dtype=float)
    n = y.shape[0]
    if cache.raw.shape[0] != n:
        raise ValueError("covariates and outcome disagree on row count")
    w = _prep_weights(n, weights)
    if not (np.isfinite(cache.raw).all() and np.isfinite(y).all()):
        raise ValueError("covariates and outcome must be finite")

    if len(specs) == 1:
        fit = _fit_candidate(specs[0], cache, y, w)
        return Predictor(
            kind="stacked",
            components=(fit,),
            weights=np.array([1.0]),
            diagnostics={"candidates": [specs[0].name]},
        )

    if folds is None:
        raise ValueError("stacking over several candidates requires folds")
    if folds.n != n:
        raise ValueError("fold assignment length does not match rows")

    survivors: list[LearnerSpec] = []
    warm: list[Predictor | None] = []
    oof_cols: list[NDArray] = []
    for spec in specs:
        try:
            if spec.family == "linear":
                oof = _linear_oof(cache, spec, y, w, folds)
                ws = None
            elif spec.family == "logistic":
                # the full-data fit doubles as refit component and warm start
                ws = _fit_candidate(spec, cache, y, w)
                oof = _logistic_oof(cache, spec, y, w, folds, ws)
            else:
                oof = _cell_oof(cache, y, w, folds)
                ws = None
        except Exception as exc:  # noqa: BLE001 - candidate failure is survivable
            warnings.warn(f"candidate {spec.name} dropped: {exc}", stacklevel=2)
            continue
        survivors.append(spec)
        warm.append(ws)
        oof_cols.append(oof)
    if not survivors:
        raise SuperLearnerFailed("every stacking candidate failed to fit")

    P = np.column_stack(oof_cols)
    if loss == "bernoulli":
        P = np.clip(P, PROB_FLOOR, 1.0 - PROB_FLOOR)
    if len(survivors) == 1:
        alpha, eg_iters = np.array([1.0]), 0
        vertex_losses = np.array([_cv_loss(P, alpha, y, w, loss)])
    else:
        alpha, eg_iters, vertex_losses = _stack_weights(P, y, w, loss)

    components = tuple(
        ws if ws is not None else _fit_candidate(spec, cache, y, w)
        for spec, ws in zip(survivors, warm)
    )
    return Predictor(
        kind="stacked",
        components=components,
        weights=alpha,
        diagnostics={
            "candidates": [s.name for s in survivors],
            "cv_losses": vertex_losses.tolist(),
            "cv_loss": _cv_loss(P, alpha, y, w, loss),
            "eg_iterations": eg_iters,
        },
    )
