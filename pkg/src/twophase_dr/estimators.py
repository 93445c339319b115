"""Counterfactual-mean and ATE estimators for two-phase mismeasured data.

Two identification routes coexist and are kept deliberately separate:

* route 1 goes through the imputation/marginalized system: the plug-in
  mean(eta_hat/pi_hat) and its one-step correction built from the full
  efficient influence curve of that functional;
* route 2 goes through the validation-weighted complete-data system: the
  plug-in mean(m_hat) and a one-step whose correction inverse-weights the
  complete-data influence evaluation chi and subtracts an estimated
  projection of chi on the phase-one information (conventional or
  error-weighted), plus a targeted update (tmle2) that solves the same
  score equations by fluctuation instead of by adding the correction.

A convex ensemble combines the two one-step routes with a variance-minimizing
weight. All intervals are Wald intervals from the per-row influence curve.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit
from scipy.stats import norm

from .data import Dataset, EstimateResult
from .errors import (
    DegenerateOutcomeRange,
    EmptyArm,
    GoldUnavailable,
    MismatchedLength,
    TooFewRows,
)
from .learners import FeatureCache, FoldAssignment, fit_logistic_irls
from .nuisance import NuisanceSet, crossfit_predict, resolve_menu

METHOD_TAGS = (
    "pi1",
    "pi2",
    "os1",
    "os2",
    "os2_eem",
    "tmle2",
    "ensemble",
    "naive_aipw",
    "oracle_aipw",
)

TMLE_MAX_CYCLES = 100
TMLE_SCORE_TOL = 1e-9
OUTCOME_MARGIN = 0.01


def variance_from_ic(
    ic: NDArray, level: float = 0.95, point: float = 0.0
) -> tuple[float, float, float]:
    """Wald machinery: se = sqrt(var(ic)/n), CI = point +- z * se."""
    ic = np.asarray(ic, dtype=float)
    n = ic.shape[0]
    if n < 2:
        raise TooFewRows("variance needs at least 2 influence values")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    se = float(np.sqrt(np.var(ic, ddof=1) / n))
    z = float(norm.ppf(0.5 * (1.0 + level)))
    return se, point - z * se, point + z * se


def _result(
    method: str,
    estimand: str,
    contrib: NDArray,
    level: float,
    diagnostics: dict | None = None,
    point: float | None = None,
) -> EstimateResult:
    """Wrap per-row contributions whose mean is the point estimate."""
    contrib = np.asarray(contrib, dtype=float)
    est = float(np.mean(contrib)) if point is None else point
    ic = contrib - est
    se, lo, hi = variance_from_ic(ic, level, est)
    return EstimateResult(
        method=method,
        estimand=estimand,
        point=est,
        ic=ic,
        se=se,
        ci_low=lo,
        ci_high=hi,
        ci_level=level,
        diagnostics=diagnostics or {},
    )


# ----------------------------------------------------------------------
# plug-ins
# ----------------------------------------------------------------------


def plugin1(d: Dataset, nus: NuisanceSet, arm: int, level: float = 0.95) -> EstimateResult:
    """Plug-in mean of eta_hat/pi_hat; the interval ignores nuisance drift."""
    contrib = nus.eta[arm] / nus.pi[arm]
    return _result("pi1", f"mean_y{arm}", contrib, level)


def plugin2(d: Dataset, nus: NuisanceSet, arm: int, level: float = 0.95) -> EstimateResult:
    """Plug-in mean of the validation-weighted regression m_hat."""
    return _result("pi2", f"mean_y{arm}", nus.m[arm], level)


# ----------------------------------------------------------------------
# one-step corrections
# ----------------------------------------------------------------------


def onestep1(d: Dataset, nus: NuisanceSet, arm: int, level: float = 0.95) -> EstimateResult:
    """One-step estimator on the imputation/marginalized route.

    The per-row contribution is the estimated influence-curve evaluation
    before centering: eta/pi plus an imputation correction available on all
    rows and a validation correction that inverse-weights validated rows.
    Its mean is the estimate; the influence curve is the same expression
    centered at the estimate.
    """
    h = nus.eta[arm] / nus.pi[arm]
    lam = nus.lam[arm]
    mu = nus.mu[arm]
    pi = nus.pi[arm]
    kap = nus.kappa
    val = d.validated
    ind = np.where(val, np.nan_to_num(d.a, nan=-1.0) == arm, False).astype(float)
    resid_y = np.where(val, np.nan_to_num(d.y, nan=0.0) - h, 0.0)
    contrib = (
        h
        + (lam / pi) * (mu - h)
        + ind / (kap * pi) * resid_y
        - val / (kap * pi) * lam * (mu - h)
    )
    plug = float(np.mean(h))
    return _result(
        "os1",
        f"mean_y{arm}",
        contrib,
        level,
        {"plugin": plug, "correction": float(np.mean(contrib)) - plug},
    )


def onestep2(
    d: Dataset,
    nus: NuisanceSet,
    arm: int,
    variant: str = "conventional",
    level: float = 0.95,
) -> EstimateResult:
    """One-step estimator on the validation-weighted route.

    Adds to the plug-in mean(m_hat) the mean of
    (r/kappa) * chi - (r/kappa - 1) * varphi_hat, where chi is centered at
    the plug-in and varphi_hat projects chi on the phase-one information
    ("conventional" fit on validated rows, "eem" error-weighted over all
    rows).
    """
    if variant == "conventional":
        vphi = nus.varphi[arm]
        tag = "os2"
    elif variant == "eem":
        vphi = nus.varphi_eem[arm]
        tag = "os2_eem"
    else:
        raise ValueError(f"unknown varphi variant {variant!r}")
    plug = nus.plugin2[arm]
    ratio = d.r / nus.kappa
    chi_filled = np.where(d.validated, np.nan_to_num(nus.chi[arm], nan=0.0), 0.0)
    aug = ratio * chi_filled - (ratio - 1.0) * vphi
    contrib = plug + aug
    return _result(
        tag,
        f"mean_y{arm}",
        contrib,
        level,
        {"plugin": plug, "correction": float(np.mean(aug)), "varphi_variant": variant},
    )


# ----------------------------------------------------------------------
# targeted update
# ----------------------------------------------------------------------


def tmle2(
    d: Dataset,
    nus: NuisanceSet,
    arm: int,
    level: float = 0.95,
    max_cycles: int = TMLE_MAX_CYCLES,
    score_tol: float = TMLE_SCORE_TOL,
) -> EstimateResult:
    """Targeted update of the validation-weighted route.

    Alternates two logistic fluctuations until the empirical influence-curve
    equation is solved: the validation model kappa is fluctuated along the
    clever covariates [varphi_hat/kappa, (m - psi)/kappa], and the bounded
    rescaled outcome model m is fluctuated along 1{A=arm}/g_hat with weights
    r/kappa. The point estimate is the mean of the updated m on the original
    outcome scale; the influence curve is the inverse-weighted influence
    evaluation at the updated models.
    """
    val = d.validated
    y_val = d.y[val]
    lo = float(y_val.min())
    hi = float(y_val.max())
    rng_y = hi - lo
    if rng_y <= 0.0:
        raise DegenerateOutcomeRange("validated outcomes are constant")
    lo -= OUTCOME_MARGIN * rng_y
    hi += OUTCOME_MARGIN * rng_y
    span = hi - lo

    g = nus.g[arm]
    vphi = nus.varphi[arm]
    r = d.r.astype(float)
    ind = np.where(val, np.nan_to_num(d.a, nan=-1.0) == arm, False).astype(float)
    y_filled = np.where(val, np.nan_to_num(d.y, nan=0.0), 0.0)
    y_s = np.where(val, (y_filled - lo) / span, 0.0)
    clever_y = ind / g  # fit-time covariate; equals 1/g on the rows that matter
    vrows = np.flatnonzero(val)
    design_y = clever_y[vrows][:, None]
    sd_vphi = float(np.std(vphi))

    m_s = np.clip((nus.m[arm] - lo) / span, 1e-6, 1.0 - 1e-6)
    kap = np.clip(nus.kappa, nus.clip_eps, 1.0 - 1e-10)

    cycles = 0
    zeta = np.zeros(2)
    eps_coef = 0.0
    for cycles in range(1, max_cycles + 1):
        m_bt = lo + span * m_s
        psi = float(np.mean(m_bt))
        ratio = r / kap

        s1 = float(np.mean(ratio * clever_y * (y_filled - m_bt)))
        s2 = float(np.mean((ratio - 1.0) * (m_bt - psi)))
        s3 = float(np.mean((ratio - 1.0) * vphi))
        scale = max(1.0, float(np.std(m_bt - psi)), sd_vphi)
        if max(abs(s1), abs(s2), abs(s3)) < score_tol * scale:
            break

        # validation-model fluctuation along both clever covariates
        H = np.column_stack([vphi / kap, (m_bt - psi) / kap])
        fit_k = fit_logistic_irls(
            H, r, offset=logit(kap), include_intercept=False
        )
        zeta = fit_k.coef[1:]
        kap = np.clip(expit(logit(kap) + H @ zeta), nus.clip_eps, 1.0 - 1e-10)

        # outcome-model fluctuation with validation weights r/kappa
        off = logit(np.clip(m_s, 1e-9, 1.0 - 1e-9))
        fit_m = fit_logistic_irls(
            design_y,
            y_s[vrows],
            weights=(r / kap)[vrows],
            offset=off[vrows],
            include_intercept=False,
        )
        eps_coef = float(fit_m.coef[1])
        m_s = np.clip(expit(off + eps_coef / g), 1e-9, 1.0 - 1e-9)

    m_bt = lo + span * m_s
    psi = float(np.mean(m_bt))
    ratio = r / kap
    chi_star = clever_y * (y_filled - m_bt) + m_bt - psi
    ic = ratio * chi_star - (ratio - 1.0) * vphi
    se, ci_lo, ci_hi = variance_from_ic(ic, level, psi)
    sd_ic = float(np.std(ic, ddof=1))
    return EstimateResult(
        method="tmle2",
        estimand=f"mean_y{arm}",
        point=psi,
        ic=ic,
        se=se,
        ci_low=ci_lo,
        ci_high=ci_hi,
        ci_level=level,
        diagnostics={
            "cycles": cycles,
            "mean_ic": float(np.mean(ic)),
            "sd_ic": sd_ic,
            "zeta": [float(v) for v in zeta],
            "epsilon": eps_coef,
            "plugin": nus.plugin2[arm],
        },
    )


# ----------------------------------------------------------------------
# ensemble and arm arithmetic
# ----------------------------------------------------------------------


def ensemble(
    res1: EstimateResult,
    res2: EstimateResult,
    delta: float = 0.01,
    level: float | None = None,
) -> EstimateResult:
    """Variance-minimizing convex combination of two estimators.

    The weight on res1 is (v2 - c + delta*V) / (V - 2c + 2*delta*V) with
    V = v1 + v2, truncated to [0, 1]; v and c are the sample variance and
    covariance of the paired influence curves. Equal variances give weight
    one half exactly, regardless of covariance and delta.
    """
    if res1.estimand != res2.estimand:
        raise ValueError("cannot combine estimators of different estimands")
    ic1 = np.asarray(res1.ic, dtype=float)
    ic2 = np.asarray(res2.ic, dtype=float)
    if ic1.shape != ic2.shape:
        raise MismatchedLength("influence curves have different lengths")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    v1 = float(np.var(ic1, ddof=1))
    v2 = float(np.var(ic2, ddof=1))
    c = float(np.cov(ic1, ic2)[0, 1])
    V = v1 + v2
    dv = delta * V
    num = (v2 - c) + dv
    den = ((v1 + v2) - 2.0 * c) + 2.0 * dv
    w = 0.5 if den == 0.0 else num / den
    w = min(1.0, max(0.0, w))
    point = w * res1.point + (1.0 - w) * res2.point
    ic = w * ic1 + (1.0 - w) * ic2
    lvl = level if level is not None else res1.ci_level
    se, lo, hi = variance_from_ic(ic, lvl, point)
    return EstimateResult(
        method="ensemble",
        estimand=res1.estimand,
        point=point,
        ic=ic,
        se=se,
        ci_low=lo,
        ci_high=hi,
        ci_level=lvl,
        diagnostics={
            "weight": w,
            "var1": v1,
            "var2": v2,
            "cov": c,
            "components": [res1.method, res2.method],
        },
    )


def ate_from_arms(res1: EstimateResult, res0: EstimateResult) -> EstimateResult:
    """Difference of two arm results sharing a method and sample."""
    if res1.method != res0.method:
        raise ValueError("arm results come from different methods")
    ic1 = np.asarray(res1.ic, dtype=float)
    ic0 = np.asarray(res0.ic, dtype=float)
    if ic1.shape != ic0.shape:
        raise MismatchedLength("arm influence curves have different lengths")
    point = res1.point - res0.point
    ic = ic1 - ic0
    se, lo, hi = variance_from_ic(ic, res1.ci_level, point)
    return EstimateResult(
        method=res1.method,
        estimand="ate",
        point=point,
        ic=ic,
        se=se,
        ci_low=lo,
        ci_high=hi,
        ci_level=res1.ci_level,
        diagnostics={"psi1": res1.point, "psi0": res0.point},
    )


# ----------------------------------------------------------------------
# complete-data AIPW (benchmark methods)
# ----------------------------------------------------------------------


def aipw_point_ic(
    outcome: NDArray,
    treat: NDArray,
    m_arm: NDArray,
    g_arm: NDArray,
    arm: int,
) -> NDArray:
    """Per-row AIPW contributions 1{t=arm}/g * (y - m) + m."""
    ind = (np.asarray(treat, dtype=float) == arm).astype(float)
    return ind / g_arm * (np.asarray(outcome, dtype=float) - m_arm) + m_arm


def aipw_pair(
    d: Dataset,
    outcome_source: str,
    learners,
    folds: FoldAssignment | None,
    level: float = 0.95,
    clip_eps: float = 0.01,
) -> dict[int, EstimateResult]:
    """Cross-fit AIPW for both arms, sharing one propensity fit.

    ``outcome_source`` "gold" uses (a, y) and requires every row validated;
    "starred" uses the error-prone (a_star, y_star), which exist everywhere.
    These are the oracle and naive benchmarks for simulations.
    """
    if outcome_source == "gold":
        if not d.is_complete:
            raise GoldUnavailable("gold-standard AIPW requires a fully validated dataset")
        yv = d.y
        t = d.a
        tag = "oracle_aipw"
    elif outcome_source == "starred":
        yv = d.y_star
        t = d.a_star.astype(float)
        tag = "naive_aipw"
    else:
        raise ValueError(f"unknown outcome source {outcome_source!r}")
    for a in (0, 1):
        if not (t == a).any():
            raise EmptyArm(f"no rows with arm {a}")
    continuous, binary = resolve_menu(learners)
    cache = FeatureCache(d.x)
    everywhere = np.ones(d.n, dtype=bool)
    p1 = crossfit_predict(d, cache, binary, t, "bernoulli", folds, everywhere)
    g1 = np.clip(p1, clip_eps, 1.0 - clip_eps)
    g0 = np.clip(1.0 - p1, clip_eps, 1.0 - clip_eps)
    total = g1 + g0
    g = {1: g1 / total, 0: g0 / total}
    out = {}
    for arm in (0, 1):
        m_arm = crossfit_predict(d, cache, continuous, yv, "squared", folds, t == arm)
        contrib = aipw_point_ic(yv, t, m_arm, g[arm], arm)
        out[arm] = _result(
            tag, f"mean_y{arm}", contrib, level, {"outcome_source": outcome_source}
        )
    return out


def aipw_complete(
    d: Dataset,
    outcome_source: str,
    learners,
    folds: FoldAssignment | None,
    arm: int,
    level: float = 0.95,
    clip_eps: float = 0.01,
) -> EstimateResult:
    """Cross-fit AIPW for one arm; see aipw_pair."""
    return aipw_pair(d, outcome_source, learners, folds, level, clip_eps)[arm]
