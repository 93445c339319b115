"""Shared builders for the test suite.

Two kinds of fixtures live here: draws from the simulation design (for
statistical checks against known truth) and small saturated discrete
instances where every nuisance fit is exact, so estimator identities can
be checked against enumeration rather than against tolerance-laden fits.
"""
from __future__ import annotations

import itertools

import numpy as np

from twophase_dr.data import Dataset, ScenarioConfig
from twophase_dr.simulation import DgpParams, apply_two_phase, generate_complete


def draw_two_phase(n: int, rho: float, seed: int, params: DgpParams | None = None):
    """One masked two-phase sample plus the complete data behind it."""
    params = params if params is not None else DgpParams()
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    complete = generate_complete(params, n, rng)
    masked = apply_two_phase(complete, rho, params.theta, rng)
    return masked, complete


def cell_config(n: int, kappa_mode: str) -> ScenarioConfig:
    """Config that resolves every nuisance to a saturated cell-mean fit."""
    return ScenarioConfig(
        n=n,
        rho=0.5,
        reps=1,
        master_seed=0,
        folds=5,
        clip_eps=0.01,
        delta=0.01,
        kappa_mode=kappa_mode,
        learner_menu=("cell",),
        ci_level=0.95,
    )


def saturated_complete():
    """Fully validated discrete instance: binary x1, x2, a, a_star, y, y_star.

    Every configuration appears with a frequency-varying count, so saturated
    cell fits reproduce the empirical law exactly and the empirical law IS
    the population. Returns (dataset, raw array with columns
    x1, x2, a, a_star, y, y_star, config).
    """
    rows = []
    for x1, x2, a, a_st, y, y_st in itertools.product((0, 1), repeat=6):
        cnt = 1 + ((3 * x1 + 5 * x2 + 7 * a + 11 * a_st + 13 * y + 17 * y_st + x1 * y + a * y_st) % 4)
        rows += [(x1, x2, a, a_st, y, y_st)] * cnt
    arr = np.array(rows, dtype=float)
    n = len(arr)
    d = Dataset.from_arrays(
        x=arr[:, :2],
        a_star=arr[:, 3].astype(np.int64),
        y_star=arr[:, 5],
        r=np.ones(n, dtype=np.int64),
        a=arr[:, 2],
        y=arr[:, 4],
        kappa_known=np.ones(n),
    )
    return d, arr, cell_config(n, "known")


def saturated_two_phase():
    """Two-phase discrete instance with every (z, a, y, r) configuration.

    Counts factor as f(z, a, y) * g(z, r), so validation is empirically
    ignorable given z: the validated subtable reproduces the full-table law
    inside every z cell, the saturated estimated kappa is interior, and
    every (x, a) pair appears among validated rows. Saturated fits are then
    exact and the estimators must reproduce the full-table g-formula.
    """
    rows = []
    for x1, x2, a_st, y_st in itertools.product((0, 1), repeat=4):
        g1 = 1 + ((x1 + 2 * x2 + 3 * a_st + y_st) % 2)
        g0 = 1 + ((x2 + a_st + y_st) % 2)
        for a, y in itertools.product((0, 1), repeat=2):
            f = 1 + ((2 * x1 + 3 * x2 + 5 * a + 7 * a_st + 11 * y + 13 * y_st + x1 * y_st + a * y) % 4)
            rows += [(x1, x2, a, a_st, y, y_st, 1)] * (f * g1)
            rows += [(x1, x2, a, a_st, y, y_st, 0)] * (f * g0)
    arr = np.array(rows, dtype=float)
    n = len(arr)
    rvec = arr[:, 6].astype(np.int64)
    d = Dataset.from_arrays(
        x=arr[:, :2],
        a_star=arr[:, 3].astype(np.int64),
        y_star=arr[:, 5],
        r=rvec,
        a=np.where(rvec == 1, arr[:, 2], np.nan),
        y=np.where(rvec == 1, arr[:, 4], np.nan),
    )
    return d, arr, cell_config(n, "estimated")


def enumeration_psi(arr: np.ndarray, arm: int) -> float:
    """Empirical g-formula value on a saturated instance's raw table."""
    psi = 0.0
    for x1, x2 in itertools.product((0, 1), (0, 1)):
        cell = (arr[:, 0] == x1) & (arr[:, 1] == x2)
        in_arm = cell & (arr[:, 2] == arm)
        psi += cell.mean() * arr[in_arm, 4].mean()
    return psi
