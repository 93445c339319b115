"""Nuisance fitting: kappa modes, the imputation stack, chi, and both
projections of chi onto the phase-one information."""
import numpy as np
import pytest
from scipy.special import expit

from twophase_dr.data import Dataset, ScenarioConfig
from twophase_dr.errors import (
    DegenerateWeights,
    EmptyArm,
    MissingKappa,
    UnvalidatedRow,
)
from twophase_dr.learners import FoldAssignment, fit_wls, make_folds
from twophase_dr.nuisance import (
    compute_chi,
    fit_full_data_models,
    fit_imputation_models,
    fit_kappa,
    fit_marginalized_models,
    fit_nuisances,
    fit_varphi_conventional,
    fit_varphi_eem,
    resolve_menu,
)

from helpers import draw_two_phase

MENU = ("lin", "logit")


def kappa_design(n, seed, r_from_kappa):
    """Two-phase rows with a known, smooth sampling probability in z."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    x = rng.uniform(size=(n, 2))
    a_star = (rng.uniform(size=n) < 0.5).astype(float)
    y_star = rng.normal(size=n)
    kap = np.clip(
        expit(0.4 - 0.5 * x[:, 0] + 0.3 * x[:, 1] + 0.2 * a_star - 0.1 * y_star),
        0.05,
        0.95,
    )
    p = kap if r_from_kappa else np.full(n, 0.4)
    r = (rng.uniform(size=n) < p).astype(int)
    a = np.where(r == 1, (rng.uniform(size=n) < 0.5).astype(float), np.nan)
    y = np.where(r == 1, rng.normal(size=n), np.nan)
    d = Dataset.from_arrays(x, a_star, y_star, r, a=a, y=y, kappa_known=kap)
    return d, kap


# ----------------------------------------------------------------------
# kappa
# ----------------------------------------------------------------------


def test_fit_kappa_known_is_identity():
    d, _ = kappa_design(50, 1, True)
    d2 = Dataset.from_arrays(
        d.x, d.a_star, d.y_star, d.r, a=d.a, y=d.y, kappa_known=np.full(d.n, 0.3)
    )
    assert np.array_equal(fit_kappa(d2, "known"), np.full(d.n, 0.3))


def test_fit_kappa_known_clips_at_floor():
    d, _ = kappa_design(50, 2, True)
    d2 = Dataset.from_arrays(
        d.x, d.a_star, d.y_star, d.r, a=d.a, y=d.y, kappa_known=np.full(d.n, 0.001)
    )
    assert np.array_equal(fit_kappa(d2, "known", clip_eps=0.01), np.full(d.n, 0.01))


def test_fit_kappa_known_requires_column():
    d, _ = kappa_design(50, 3, True)
    bare = Dataset.from_arrays(d.x, d.a_star, d.y_star, d.r, a=d.a, y=d.y)
    with pytest.raises(MissingKappa):
        fit_kappa(bare, "known")
    with pytest.raises(MissingKappa):
        fit_kappa(bare, "known_refit")


def test_fit_kappa_unknown_mode():
    d, _ = kappa_design(50, 4, True)
    with pytest.raises(ValueError, match="kappa mode"):
        fit_kappa(d, "oracle")


def test_fit_kappa_refit_tracks_truth_when_design_is_exact():
    # R drawn exactly from kappa_known, so the offset logistic adjustment
    # should estimate coefficients near zero and stay close to the truth
    d, kap = kappa_design(10000, 71, True)
    est = fit_kappa(d, "known_refit")
    assert np.max(np.abs(est - kap)) < 0.05


def test_fit_kappa_estimated_recovers_marginal_rate():
    d, _ = kappa_design(10000, 72, False)
    est = fit_kappa(d, "estimated", learners=MENU)
    assert abs(float(np.mean(est)) - 0.4) < 0.02


def test_fit_kappa_estimated_requires_learners():
    d, _ = kappa_design(50, 5, True)
    with pytest.raises(ValueError, match="learner"):
        fit_kappa(d, "estimated")


# ----------------------------------------------------------------------
# imputation models (z-based, validated rows)
# ----------------------------------------------------------------------


def test_imputation_constant_outcome():
    masked, _ = draw_two_phase(400, 0.6, 11)
    d = Dataset.from_arrays(
        masked.x,
        masked.a_star,
        masked.y_star,
        masked.r,
        a=masked.a,
        y=np.where(masked.validated, 3.0, np.nan),
        kappa_known=masked.kappa_known,
    )
    for arm in (0, 1):
        mu, _ = fit_imputation_models(d, arm, MENU, folds=None)
        assert np.allclose(mu, 3.0, atol=1e-8)


def test_imputation_empty_arm():
    d, _ = kappa_design(60, 12, True)
    one_armed = Dataset.from_arrays(
        d.x,
        d.a_star,
        d.y_star,
        d.r,
        a=np.where(d.validated, 1.0, np.nan),
        y=d.y,
        kappa_known=d.kappa_known,
    )
    with pytest.raises(EmptyArm):
        fit_imputation_models(one_armed, 0, MENU, folds=None)


def test_imputation_bad_arm():
    d, _ = kappa_design(60, 13, True)
    with pytest.raises(ValueError, match="arm"):
        fit_imputation_models(d, 2, MENU, folds=None)


def test_lambda_arms_sum_to_one():
    masked, _ = draw_two_phase(300, 0.5, 5)
    lam1 = fit_imputation_models(masked, 1, MENU, folds=None)[1]
    lam0 = fit_imputation_models(masked, 0, MENU, folds=None)[1]
    assert np.allclose(lam1 + lam0, 1.0, atol=1e-12)
    assert np.all((lam1 > 0.0) & (lam1 < 1.0))


# ----------------------------------------------------------------------
# marginalized models (x-based, all rows)
# ----------------------------------------------------------------------


def test_marginalized_constants():
    masked, _ = draw_two_phase(200, 0.5, 7)
    eta, pi = fit_marginalized_models(
        masked, np.full(masked.n, 2.0), np.full(masked.n, 0.5), MENU, folds=None
    )
    assert np.allclose(eta, 1.0, atol=1e-8)
    assert np.allclose(pi, 0.5, atol=1e-8)


def test_marginalized_linear_recovery():
    masked, _ = draw_two_phase(300, 0.5, 8)
    x1 = masked.x[:, 0]
    mu = 2.0 * (0.3 + 0.7 * x1)
    lam = np.full(masked.n, 0.5)
    eta, _ = fit_marginalized_models(masked, mu, lam, MENU, folds=None)
    target = 0.3 + 0.7 * x1
    assert np.max(np.abs(eta - target)) < 1e-8
    ss_res = float(np.sum((eta - target) ** 2))
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    assert 1.0 - ss_res / ss_tot > 0.999


def test_marginalized_clipping():
    masked, _ = draw_two_phase(200, 0.5, 9)
    _, pi = fit_marginalized_models(
        masked,
        np.full(masked.n, 1.0),
        np.full(masked.n, 0.001),
        MENU,
        folds=None,
        clip_eps=0.01,
    )
    assert np.allclose(pi, 0.01, atol=1e-10)


# ----------------------------------------------------------------------
# full-data models (x-based, validation-weighted)
# ----------------------------------------------------------------------


def complete_design(n, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    x = rng.uniform(size=(n, 2))
    a = (rng.uniform(size=n) < expit(x[:, 0] - x[:, 1])).astype(float)
    y = 1.0 + 2.0 * x[:, 0] - x[:, 1] + 0.5 * a + rng.normal(size=n)
    return Dataset.from_arrays(
        x, a, y, np.ones(n, dtype=int), a=a, y=y, kappa_known=np.ones(n)
    )


def test_full_data_reduces_to_unweighted_on_complete_data():
    d = complete_design(400, 31)
    m, g = fit_full_data_models(d, np.ones(d.n), 1, MENU, folds=None)
    mask = d.a == 1.0
    direct = fit_wls(d.x[mask], d.y[mask]).predict(d.x)
    assert np.max(np.abs(m - direct)) < 1e-8
    assert np.all((g > 0.0) & (g < 1.0))


def test_full_data_constant_outcome():
    masked, _ = draw_two_phase(400, 0.6, 32)
    d = Dataset.from_arrays(
        masked.x,
        masked.a_star,
        masked.y_star,
        masked.r,
        a=masked.a,
        y=np.where(masked.validated, 4.0, np.nan),
        kappa_known=masked.kappa_known,
    )
    kap = fit_kappa(d, "known")
    for arm in (0, 1):
        m, _ = fit_full_data_models(d, kap, arm, MENU, folds=None)
        assert np.allclose(m, 4.0, atol=1e-8)


def test_full_data_weights_are_scale_invariant():
    masked, _ = draw_two_phase(500, 0.5, 33)
    kap = fit_kappa(masked, "known")
    m1, g1 = fit_full_data_models(masked, kap, 1, MENU, folds=None)
    m2, g2 = fit_full_data_models(masked, kap / 2.0, 1, MENU, folds=None)
    assert np.max(np.abs(m1 - m2)) < 1e-8
    assert np.max(np.abs(g1 - g2)) < 1e-8


def test_full_data_arm_sums():
    masked, _ = draw_two_phase(300, 0.5, 34)
    kap = fit_kappa(masked, "known")
    _, g1 = fit_full_data_models(masked, kap, 1, MENU, folds=None)
    _, g0 = fit_full_data_models(masked, kap, 0, MENU, folds=None)
    assert np.allclose(g1 + g0, 1.0, atol=1e-12)


# ----------------------------------------------------------------------
# chi
# ----------------------------------------------------------------------


def test_chi_arithmetic():
    assert compute_chi(2.0, 1.0, 1.0, 1.0, 0.5, 1, 0.0) == pytest.approx(3.0)


def test_chi_indicator_kills_residual():
    # observed arm 0, asking for arm 1 with m1 = center: residual dropped
    assert compute_chi(7.0, 0.0, 1.0, 5.0, 0.5, 1, 1.0) == pytest.approx(0.0)


def test_chi_zero_residual_returns_m():
    assert compute_chi(1.5, 1.0, 1.5, 0.7, 0.3, 1, 0.0) == pytest.approx(1.5)


def test_chi_vectorized_matches_rowwise():
    rng = np.random.default_rng(np.random.SeedSequence([41]))
    n = 50
    y = rng.normal(size=n)
    a = (rng.uniform(size=n) < 0.5).astype(float)
    m1 = rng.normal(size=n)
    m0 = rng.normal(size=n)
    g = rng.uniform(0.2, 0.8, size=n)
    vec = compute_chi(y, a, m1, m0, g, 1, 0.25)
    rows = [
        compute_chi(y[i], a[i], m1[i], m0[i], g[i], 1, 0.25) for i in range(n)
    ]
    assert np.allclose(vec, np.array(rows), atol=1e-12)


def test_chi_rejects_unvalidated_rows():
    with pytest.raises(UnvalidatedRow):
        compute_chi(np.array([1.0, np.nan]), np.array([1.0, 0.0]),
                    1.0, 1.0, 0.5, 1, 0.0)
    with pytest.raises(UnvalidatedRow):
        compute_chi(np.array([1.0, 2.0]), np.array([1.0, np.nan]),
                    1.0, 1.0, 0.5, 1, 0.0)


# ----------------------------------------------------------------------
# varphi, conventional projection
# ----------------------------------------------------------------------


def test_varphi_conventional_constant():
    masked, _ = draw_two_phase(300, 0.5, 51)
    chi = np.where(masked.validated, 2.5, np.nan)
    phi = fit_varphi_conventional(masked, chi, MENU, folds=None)
    assert phi.shape == (masked.n,)
    assert np.allclose(phi, 2.5, atol=1e-8)


def test_varphi_conventional_linear_recovery():
    masked, _ = draw_two_phase(300, 0.5, 52)
    truth = 0.5 + masked.x[:, 0] - 0.25 * masked.y_star
    chi = np.where(masked.validated, truth, np.nan)
    phi = fit_varphi_conventional(masked, chi, MENU, folds=None)
    # recovery must extend to the unvalidated rows, whose z is observed
    assert np.max(np.abs(phi - truth)) < 1e-6
    assert np.all(np.isfinite(phi[~masked.validated]))


# ----------------------------------------------------------------------
# varphi, error-weighted projection
# ----------------------------------------------------------------------


def test_varphi_eem_worked_rows():
    # one z-cell, four rows: (r=1, k=1/4, chi=1) carries weight 9 and
    # pseudo-outcome 4/3; the r=0 row weight 1 and outcome 0; (r=1, k=1/2,
    # chi=2) weight 1 and outcome 4; the r=1, k=1 row drops out entirely
    x = np.full((4, 1), 0.5)
    a_star = np.zeros(4)
    y_star = np.ones(4)
    r = np.array([1, 0, 1, 1])
    a = np.array([1.0, np.nan, 0.0, 1.0])
    y = np.array([5.0, np.nan, 7.0, 9.0])
    d = Dataset.from_arrays(x, a_star, y_star, r, a=a, y=y)
    chi = np.array([1.0, np.nan, 2.0, 3.0])
    kappa = np.array([0.25, 0.5, 0.5, 1.0])
    phi = fit_varphi_eem(d, chi, kappa, ("cell",), folds=None)
    expected = (9.0 * (4.0 / 3.0) + 1.0 * 0.0 + 1.0 * 4.0) / (9.0 + 1.0 + 1.0)
    assert np.allclose(phi, expected, atol=1e-12)


def test_varphi_eem_degenerate_weights():
    d = complete_design(20, 53)
    chi = np.linspace(-1.0, 1.0, 20)
    with pytest.raises(DegenerateWeights, match="r/kappa"):
        fit_varphi_eem(d, chi, np.ones(20), MENU, folds=None)


def test_varphi_eem_attains_direct_objective():
    masked, _ = draw_two_phase(250, 0.5, 54)
    kap = fit_kappa(masked, "known")
    rng = np.random.default_rng(np.random.SeedSequence([55]))
    truth = 0.2 * masked.x[:, 0] - 0.1 * masked.y_star
    chi = np.where(masked.validated, truth + rng.normal(size=masked.n), np.nan)
    phi = fit_varphi_eem(masked, chi, kap, MENU, folds=None)

    ratio = masked.r / kap
    chi_filled = np.where(masked.validated, np.nan_to_num(chi, nan=0.0), 0.0)
    design = (ratio - 1.0)[:, None] * np.column_stack(
        [np.ones(masked.n), masked.z]
    )
    target = ratio * chi_filled
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    direct = np.column_stack([np.ones(masked.n), masked.z]) @ coef

    def objective(f):
        return float(np.mean((target - (ratio - 1.0) * f) ** 2))

    assert objective(phi) <= objective(direct) + 1e-10


# ----------------------------------------------------------------------
# cross-fit purity
# ----------------------------------------------------------------------


def test_crossfit_purity_under_fold_permutation():
    menu = ("lin", "lin_int", "logit", "logit_int")
    masked, _ = draw_two_phase(240, 0.5, 21)
    folds = make_folds(masked.n, 3, seed=np.random.SeedSequence([21, 1]),
                       strata=masked.r)
    rng = np.random.default_rng(np.random.SeedSequence([22]))
    perm = np.arange(masked.n)
    idx0 = np.flatnonzero(folds.assignment == 0)
    perm[idx0] = idx0[rng.permutation(idx0.size)]

    reordered = Dataset.from_arrays(
        masked.x[perm],
        masked.a_star[perm],
        masked.y_star[perm],
        masked.r[perm],
        a=masked.a[perm],
        y=masked.y[perm],
        kappa_known=masked.kappa_known[perm],
    )
    refolded = FoldAssignment(assignment=folds.assignment[perm], k=folds.k)

    mu1, _ = fit_imputation_models(masked, 1, menu, folds=folds)
    mu2, _ = fit_imputation_models(reordered, 1, menu, folds=refolded)
    assert np.max(np.abs(mu2 - mu1[perm])) < 1e-10

    kap1 = fit_kappa(masked, "known")
    chi1 = np.where(masked.validated, 0.3 * masked.y_star + masked.x[:, 0], np.nan)
    phi1 = fit_varphi_eem(masked, chi1, kap1, menu, folds=folds)
    phi2 = fit_varphi_eem(reordered, chi1[perm], kap1[perm], menu, folds=refolded)
    assert np.max(np.abs(phi2 - phi1[perm])) < 1e-10


# ----------------------------------------------------------------------
# menu resolution and the assembled set
# ----------------------------------------------------------------------


def test_resolve_menu_families():
    continuous, binary = resolve_menu(MENU)
    assert [s.name for s in continuous] == ["lin"]
    assert [s.name for s in binary] == ["logit"]


def test_resolve_menu_cell_serves_both():
    continuous, binary = resolve_menu(("cell",))
    assert [s.name for s in continuous] == ["cell"]
    assert [s.name for s in binary] == ["cell"]


def test_resolve_menu_requires_both_families():
    with pytest.raises(ValueError, match="binary"):
        resolve_menu(("lin",))
    with pytest.raises(ValueError, match="continuous"):
        resolve_menu(("logit",))


def test_resolve_menu_expands_and_dedupes():
    continuous, binary = resolve_menu(("sl:lin,lin_int", "logit", "lin"))
    assert [s.name for s in continuous] == ["lin", "lin_int"]
    assert [s.name for s in binary] == ["logit"]


def test_fit_nuisances_assembled_invariants():
    masked, _ = draw_two_phase(300, 0.5, 3)
    config = ScenarioConfig(n=300, rho=0.5, reps=1, learner_menu=MENU,
                            folds=3, kappa_mode="known")
    folds = make_folds(masked.n, 3, seed=np.random.SeedSequence([3, 1]),
                       strata=masked.r)
    nus = fit_nuisances(masked, config, folds)
    val = masked.validated
    assert nus.cross_fitted
    assert nus.kappa_mode == "known"
    assert np.all((nus.kappa >= 0.01) & (nus.kappa <= 1.0))
    for arm in (0, 1):
        assert np.allclose(nus.lam[1] + nus.lam[0], 1.0, atol=1e-12)
        assert np.allclose(nus.g[1] + nus.g[0], 1.0, atol=1e-12)
        assert np.all((nus.pi[arm] >= 0.01) & (nus.pi[arm] <= 0.99))
        assert np.all(np.isnan(nus.chi[arm][~val]))
        assert not np.isnan(nus.chi[arm][val]).any()
        assert np.all(np.isfinite(nus.varphi[arm]))
        assert np.all(np.isfinite(nus.varphi_eem[arm]))
        assert nus.plugin2[arm] == pytest.approx(float(np.mean(nus.m[arm])))
