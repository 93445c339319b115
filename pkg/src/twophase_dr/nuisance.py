"""Nuisance estimation for two-phase samples with mismeasured (a, y).

Three model groups feed the estimators:

* imputation models, fit on validated rows against the phase-one information
  z = (x, a_star, y_star): mu_a(z) = E[Y | z, A=a, R=1] and
  lambda_a(z) = P(A=a | z, R=1);
* marginalized models, regressions of lambda_hat*mu_hat and lambda_hat on x
  over all rows: eta_a(x) and pi_a(x);
* full-data models, validation-weighted regressions on x that estimate the
  complete-data outcome regression m_a(x) and propensity g_a(x) by weighting
  validated rows with 1/kappa(z).

On top of these sit two regressions of the complete-data influence-curve
evaluation chi onto z: the conventional projection fits chi on validated
rows only, while the error-weighted variant fits a transformed target over
all rows with weights (r/kappa - 1)^2, which minimizes the mean squared
distance between r/kappa * chi and (r/kappa - 1) * f over f directly.

Every prediction is out-of-fold when a fold assignment is supplied. Training
subsets are re-ordered by a content-derived rank before fitting, so fitted
values never depend on how rows happen to be arranged within a fold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import logit

from .data import Dataset, ScenarioConfig
from .errors import (
    DegenerateWeights,
    EmptyArm,
    MissingKappa,
    TooFewRows,
    UnvalidatedRow,
)
from .learners import (
    FeatureCache,
    FoldAssignment,
    LearnerSpec,
    Predictor,
    fit_logistic_irls,
    fit_super_learner,
    parse_learner,
    predict_rows,
)

EEM_DENOM_FLOOR = 1e-8
INTERNAL_CV_FOLDS = 5


@dataclass
class NuisanceSet:
    """Per-row nuisance predictions for both arms, plus the fitting flags."""

    kappa: NDArray
    mu: dict[int, NDArray]
    lam: dict[int, NDArray]
    eta: dict[int, NDArray]
    pi: dict[int, NDArray]
    m: dict[int, NDArray]
    g: dict[int, NDArray]
    chi: dict[int, NDArray]
    varphi: dict[int, NDArray]
    varphi_eem: dict[int, NDArray]
    plugin2: dict[int, float]
    kappa_mode: str
    cross_fitted: bool
    clip_eps: float


# ----------------------------------------------------------------------
# menu handling
# ----------------------------------------------------------------------


def resolve_menu(menu) -> tuple[tuple[LearnerSpec, ...], tuple[LearnerSpec, ...]]:
    """Split a learner menu into (continuous, binary) candidate tuples.

    Linear-family candidates serve continuous targets, logistic-family
    candidates serve probability targets, and the saturated cell learner
    serves both.
    """
    specs: list[LearnerSpec] = []
    for entry in menu:
        if isinstance(entry, LearnerSpec):
            specs.append(entry)
        else:
            specs.extend(parse_learner(entry))
    seen = set()
    uniq = [s for s in specs if not (s.name in seen or seen.add(s.name))]
    continuous = tuple(s for s in uniq if s.family in ("linear", "cell"))
    binary = tuple(s for s in uniq if s.family in ("logistic", "cell"))
    if not continuous:
        raise ValueError("learner menu has no continuous-outcome candidate")
    if not binary:
        raise ValueError("learner menu has no binary-outcome candidate")
    return continuous, binary


# ----------------------------------------------------------------------
# cross-fitting driver
# ----------------------------------------------------------------------


class _SlicedCache:
    """Row-subset view of a FeatureCache; expansions are sliced, not rebuilt."""

    __slots__ = ("parent", "rows", "raw", "_expanded")

    def __init__(self, parent: FeatureCache, rows: NDArray):
        self.parent = parent
        self.rows = rows
        self.raw = parent.raw[rows]
        self._expanded: dict[str, NDArray] = {}

    def get(self, spec: str) -> NDArray:
        if spec not in self._expanded:
            self._expanded[spec] = self.parent.get(spec)[self.rows]
        return self._expanded[spec]


def _canonical_subset(d: Dataset, rows: NDArray) -> NDArray:
    rank = d.canonical_rank()
    return rows[np.argsort(rank[rows], kind="stable")]


def _internal_folds(n_rows: int) -> FoldAssignment:
    k = min(INTERNAL_CV_FOLDS, n_rows)
    if k < 2:
        raise TooFewRows(f"cannot cross-validate on {n_rows} rows")
    return FoldAssignment(assignment=np.arange(n_rows) % k, k=k)


def _fit_subset(
    d: Dataset,
    cache: FeatureCache,
    specs: tuple[LearnerSpec, ...],
    train_rows: NDArray,
    target: NDArray,
    weights: NDArray | None,
    loss: str,
) -> Predictor:
    rows = _canonical_subset(d, train_rows)
    sliced = _SlicedCache(cache, rows)
    return fit_super_learner(
        specs,
        sliced.raw,
        target[rows],
        weights=None if weights is None else weights[rows],
        folds=_internal_folds(rows.size) if len(specs) > 1 else None,
        loss=loss,
        cache=sliced,
    )


def crossfit_predict(
    d: Dataset,
    cache: FeatureCache,
    specs: tuple[LearnerSpec, ...],
    target: NDArray,
    loss: str,
    folds: FoldAssignment | None,
    train_mask: NDArray,
    weights: NDArray | None = None,
) -> NDArray:
    """Fit on masked training rows, predict every row; out-of-fold if folds given."""
    n = d.n
    if folds is None:
        train = np.flatnonzero(train_mask)
        if train.size < 2:
            raise TooFewRows("fewer than 2 training rows")
        fit = _fit_subset(d, cache, specs, train, target, weights, loss)
        return predict_rows(fit, cache)
    if folds.n != n:
        raise ValueError("fold assignment length does not match dataset")
    out = np.empty(n)
    for f in range(folds.k):
        held = folds.heldout(f)
        train = folds.train(f)
        train = train[train_mask[train]]
        if train.size < 2:
            raise TooFewRows(f"fold {f} leaves fewer than 2 training rows")
        fit = _fit_subset(d, cache, specs, train, target, weights, loss)
        out[held] = predict_rows(fit, _SlicedCache(cache, held))
    return out


# ----------------------------------------------------------------------
# kappa
# ----------------------------------------------------------------------


def fit_kappa(
    d: Dataset,
    mode: str,
    learners=None,
    folds: FoldAssignment | None = None,
    clip_eps: float = 0.01,
    cache_z: FeatureCache | None = None,
) -> NDArray:
    """Per-row validation probability kappa(z) = P(R=1 | z).

    Modes: "known" returns the design probabilities; "known_refit" fits an
    intercept-plus-z logistic adjustment of R around the design offset
    logit(kappa); "estimated" fits P(R=1 | z) from scratch with the binary
    learner menu. Output clipped to [clip_eps, 1].
    """
    if mode == "known":
        kap = d.kappa_known
        if kap is None or np.isnan(kap).any():
            raise MissingKappa("kappa_mode='known' requires kappa on every row")
        return np.clip(kap, clip_eps, 1.0)
    cache = cache_z if cache_z is not None else FeatureCache(d.z)
    r = d.r.astype(float)
    if mode == "known_refit":
        kap = d.kappa_known
        if kap is None or np.isnan(kap).any():
            raise MissingKappa("kappa_mode='known_refit' requires kappa on every row")
        offset = logit(np.clip(kap, 1e-10, 1.0 - 1e-10))
        F = cache.get("main")
        out = np.empty(d.n)
        if folds is None:
            fit = fit_logistic_irls(F, r, offset=offset, basis="main")
            out = fit.predict(cache.raw, offset=offset)
        else:
            for f in range(folds.k):
                held = folds.heldout(f)
                train = _canonical_subset(d, folds.train(f))
                fit = fit_logistic_irls(F[train], r[train], offset=offset[train], basis="main")
                out[held] = predict_rows(fit, _SlicedCache(cache, held), offset=offset[held])
        return np.clip(out, clip_eps, 1.0)
    if mode == "estimated":
        if learners is None:
            raise ValueError("kappa_mode='estimated' requires a learner menu")
        _, binary = resolve_menu(learners)
        preds = crossfit_predict(
            d, cache, binary, r, "bernoulli", folds, np.ones(d.n, dtype=bool)
        )
        return np.clip(preds, clip_eps, 1.0)
    raise ValueError(f"unknown kappa mode {mode!r}")


# ----------------------------------------------------------------------
# imputation-based models (phase-one information z)
# ----------------------------------------------------------------------


def _check_arms(d: Dataset) -> None:
    val = d.validated
    if not val.any():
        raise EmptyArm("no validated rows")
    a_val = d.a[val]
    for arm in (0, 1):
        if not (a_val == arm).any():
            raise EmptyArm(f"no validated rows with arm {arm}")


def _lambda_pair(
    d: Dataset,
    binary_specs,
    folds: FoldAssignment | None,
    clip_eps: float,
    cache_z: FeatureCache,
) -> dict[int, NDArray]:
    _check_arms(d)
    target = np.where(d.validated, np.nan_to_num(d.a, nan=0.0), 0.0)
    p1 = crossfit_predict(d, cache_z, binary_specs, target, "bernoulli", folds, d.validated)
    lam1 = np.clip(p1, clip_eps, 1.0 - clip_eps)
    lam0 = np.clip(1.0 - p1, clip_eps, 1.0 - clip_eps)
    total = lam1 + lam0
    return {1: lam1 / total, 0: lam0 / total}


def fit_imputation_models(
    d: Dataset,
    arm: int,
    learners,
    folds: FoldAssignment | None = None,
    clip_eps: float = 0.01,
    cache_z: FeatureCache | None = None,
) -> tuple[NDArray, NDArray]:
    """Fit mu_arm(z) and lambda_arm(z) on validated rows; predict all rows.

    lambda is fit once as P(A=1 | z, R=1) and complemented, so the two arms
    sum to one per row after clipping and renormalization.
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    cache = cache_z if cache_z is not None else FeatureCache(d.z)
    continuous, binary = resolve_menu(learners)
    lam = _lambda_pair(d, binary, folds, clip_eps, cache)[arm]
    mask = d.validated & (np.nan_to_num(d.a, nan=-1.0) == arm)
    y = np.nan_to_num(d.y, nan=0.0)
    mu = crossfit_predict(d, cache, continuous, y, "squared", folds, mask)
    return mu, lam


def fit_marginalized_models(
    d: Dataset,
    mu_a: NDArray,
    lam_a: NDArray,
    learners,
    folds: FoldAssignment | None = None,
    clip_eps: float = 0.01,
    cache_x: FeatureCache | None = None,
) -> tuple[NDArray, NDArray]:
    """Regress lambda_hat*mu_hat and lambda_hat on x over all rows.

    Returns (eta_a, pi_a); pi_a is clipped to [clip_eps, 1 - clip_eps].
    """
    cache = cache_x if cache_x is not None else FeatureCache(d.x)
    continuous, _ = resolve_menu(learners)
    everywhere = np.ones(d.n, dtype=bool)
    eta = crossfit_predict(
        d, cache, continuous, lam_a * mu_a, "squared", folds, everywhere
    )
    pi = crossfit_predict(d, cache, continuous, lam_a, "squared", folds, everywhere)
    return eta, np.clip(pi, clip_eps, 1.0 - clip_eps)


# ----------------------------------------------------------------------
# full-data models (validation-weighted)
# ----------------------------------------------------------------------


def _g_pair(
    d: Dataset,
    binary_specs,
    kappa: NDArray,
    folds: FoldAssignment | None,
    clip_eps: float,
    cache_x: FeatureCache,
) -> dict[int, NDArray]:
    _check_arms(d)
    target = np.where(d.validated, np.nan_to_num(d.a, nan=0.0), 0.0)
    weights = np.where(d.validated, 1.0 / kappa, 0.0)
    p1 = crossfit_predict(
        d, cache_x, binary_specs, target, "bernoulli", folds, d.validated, weights
    )
    g1 = np.clip(p1, clip_eps, 1.0 - clip_eps)
    g0 = np.clip(1.0 - p1, clip_eps, 1.0 - clip_eps)
    total = g1 + g0
    return {1: g1 / total, 0: g0 / total}


def fit_full_data_models(
    d: Dataset,
    kappa: NDArray,
    arm: int,
    learners,
    folds: FoldAssignment | None = None,
    clip_eps: float = 0.01,
    cache_x: FeatureCache | None = None,
) -> tuple[NDArray, NDArray]:
    """Estimate the complete-data regressions m_arm(x) and g_arm(x).

    Validated rows are weighted by 1/kappa(z), which undoes the biased
    validation sampling in expectation; weights are scale-invariant, so any
    uniform rescaling of kappa leaves the fits unchanged.
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    cache = cache_x if cache_x is not None else FeatureCache(d.x)
    continuous, binary = resolve_menu(learners)
    g = _g_pair(d, binary, kappa, folds, clip_eps, cache)[arm]
    mask = d.validated & (np.nan_to_num(d.a, nan=-1.0) == arm)
    weights = np.where(d.validated, 1.0 / kappa, 0.0)
    y = np.nan_to_num(d.y, nan=0.0)
    m = crossfit_predict(d, cache, continuous, y, "squared", folds, mask, weights)
    return m, g


# ----------------------------------------------------------------------
# complete-data influence evaluations and their projections on z
# ----------------------------------------------------------------------


def compute_chi(y, a, m1, m0, g_a, arm: int, center: float):
    """Complete-data AIPW evaluation for one arm, centered at ``center``.

    chi = 1{a=arm}/g_arm * (y - m_a) + m_arm - center, where m_a uses the
    observed arm. Accepts scalars or aligned arrays; gold-standard values
    must be present (validated rows only).
    """
    y_arr = np.asarray(y, dtype=float)
    a_arr = np.asarray(a, dtype=float)
    if np.isnan(y_arr).any() or np.isnan(a_arr).any():
        raise UnvalidatedRow("chi requires gold-standard (a, y); unvalidated row seen")
    ind = (a_arr == arm).astype(float)
    m_obs = np.where(a_arr == 1.0, m1, m0)
    m_arm = np.asarray(m1 if arm == 1 else m0, dtype=float)
    out = ind / np.asarray(g_a, dtype=float) * (y_arr - m_obs) + m_arm - center
    return float(out) if out.ndim == 0 else out


def fit_varphi_conventional(
    d: Dataset,
    chi: NDArray,
    learners,
    folds: FoldAssignment | None = None,
    cache_z: FeatureCache | None = None,
) -> NDArray:
    """Project chi onto z by regression over validated rows only."""
    cache = cache_z if cache_z is not None else FeatureCache(d.z)
    continuous, _ = resolve_menu(learners)
    target = np.where(d.validated, np.nan_to_num(chi, nan=0.0), 0.0)
    return crossfit_predict(d, cache, continuous, target, "squared", folds, d.validated)


def fit_varphi_eem(
    d: Dataset,
    chi: NDArray,
    kappa: NDArray,
    learners,
    folds: FoldAssignment | None = None,
    cache_z: FeatureCache | None = None,
) -> NDArray:
    """Project chi onto z by the error-weighted regression over all rows.

    Solves the same least-squares problem as minimizing
    mean[(r/kappa * chi - (r/kappa - 1) * f(z))^2] over f: each row gets
    target (r/kappa - 1)^{-1} (r/kappa) chi and weight (r/kappa - 1)^2.
    Unvalidated rows therefore carry target 0 and weight 1; rows with
    r/kappa within 1e-8 of one drop out with weight 0.
    """
    cache = cache_z if cache_z is not None else FeatureCache(d.z)
    continuous, _ = resolve_menu(learners)
    ratio = d.r / np.asarray(kappa, dtype=float)
    denom = ratio - 1.0
    small = np.abs(denom) < EEM_DENOM_FLOOR
    chi_filled = np.where(d.validated, np.nan_to_num(chi, nan=0.0), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        target = np.where(small, 0.0, ratio * chi_filled / np.where(small, 1.0, denom))
    weights = np.where(small, 0.0, denom * denom)
    if not (weights > 0).any():
        raise DegenerateWeights("every row has r/kappa within 1e-8 of one")
    return crossfit_predict(
        d, cache, continuous, target, "squared", folds, np.ones(d.n, dtype=bool), weights
    )


# ----------------------------------------------------------------------
# full pipeline
# ----------------------------------------------------------------------


def fit_nuisances(
    d: Dataset,
    config: ScenarioConfig,
    folds: FoldAssignment | None = None,
) -> NuisanceSet:
    """Fit every nuisance the estimators need, sharing work across arms.

    With a fold assignment, every per-row prediction is out-of-fold. The
    centers used for chi (and hence for both projections of chi onto z) are
    the full-data plug-in means of m_hat per arm.
    """
    _check_arms(d)
    cache_z = FeatureCache(d.z)
    cache_x = FeatureCache(d.x)
    continuous, binary = resolve_menu(config.learner_menu)
    eps = config.clip_eps

    kappa = fit_kappa(
        d, config.kappa_mode, config.learner_menu, folds, eps, cache_z=cache_z
    )

    lam = _lambda_pair(d, binary, folds, eps, cache_z)
    y_filled = np.nan_to_num(d.y, nan=0.0)
    mu, eta, pi, m = {}, {}, {}, {}
    val = d.validated
    a_filled = np.nan_to_num(d.a, nan=-1.0)
    weights_w = np.where(val, 1.0 / kappa, 0.0)
    g = _g_pair(d, binary, kappa, folds, eps, cache_x)
    everywhere = np.ones(d.n, dtype=bool)
    for arm in (0, 1):
        mask = val & (a_filled == arm)
        mu[arm] = crossfit_predict(d, cache_z, continuous, y_filled, "squared", folds, mask)
        eta[arm] = crossfit_predict(
            d, cache_x, continuous, lam[arm] * mu[arm], "squared", folds, everywhere
        )
        pi[arm] = np.clip(
            crossfit_predict(d, cache_x, continuous, lam[arm], "squared", folds, everywhere),
            eps,
            1.0 - eps,
        )
        m[arm] = crossfit_predict(
            d, cache_x, continuous, y_filled, "squared", folds, mask, weights_w
        )

    plugin2 = {arm: float(np.mean(m[arm])) for arm in (0, 1)}
    chi, varphi, varphi_eem = {}, {}, {}
    for arm in (0, 1):
        chi_val = compute_chi(
            d.y[val], d.a[val], m[1][val], m[0][val], g[arm][val], arm, plugin2[arm]
        )
        chi_full = np.full(d.n, np.nan)
        chi_full[val] = chi_val
        chi[arm] = chi_full
        varphi[arm] = fit_varphi_conventional(
            d, chi_full, config.learner_menu, folds, cache_z=cache_z
        )
        try:
            varphi_eem[arm] = fit_varphi_eem(
                d, chi_full, kappa, config.learner_menu, folds, cache_z=cache_z
            )
        except DegenerateWeights:
            # r/kappa is one everywhere, so the augmentation (r/kappa - 1) *
            # varphi vanishes no matter what varphi is; zero is exact
            varphi_eem[arm] = np.zeros(d.n)

    return NuisanceSet(
        kappa=kappa,
        mu=mu,
        lam=lam,
        eta=eta,
        pi=pi,
        m=m,
        g=g,
        chi=chi,
        varphi=varphi,
        varphi_eem=varphi_eem,
        plugin2=plugin2,
        kappa_mode=config.kappa_mode,
        cross_fitted=folds is not None,
        clip_eps=eps,
    )
