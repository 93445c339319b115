"""Monte Carlo harness: data-generating process, replications, grid summaries.

The generating process draws three uniform covariates, a logistic treatment,
a linear outcome with treatment-covariate interactions and covariate-driven
noise variance, then degrades both: the surrogate treatment flips with fixed
probability and the surrogate outcome adds a covariate shift plus unit noise.
Validation draws R with probability proportional to a logistic function of
the phase-one information, rescaled to a target average rate and clamped
away from 0 and 1; the clamped probability is recorded as the known kappa.

Each replication is seeded from (master_seed, rep_index) alone, so any
subset of replications can be reproduced bit-for-bit in isolation and the
aggregation order never matters.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .data import Dataset, EstimateResult, ScenarioConfig
from .estimators import (
    aipw_pair,
    ate_from_arms,
    ensemble,
    onestep1,
    onestep2,
    plugin1,
    tmle2,
)
from .learners import make_folds
from .nuisance import fit_nuisances

SAMPLING_CLAMP = (0.001, 0.999)

SIMULATION_METHODS = (
    "naive_aipw",
    "oracle_aipw",
    "pi1",
    "os1",
    "os2",
    "os2_eem",
    "tmle2",
    "ensemble",
)


@dataclass(frozen=True)
class DgpParams:
    """Coefficients of the generating process."""

    beta: tuple[float, ...] = (1.0, 2.0, -2.0)
    tau: float = 1.0
    gamma: tuple[float, ...] = (1.0, 1.0, 1.0)
    delta_ps: tuple[float, ...] = (-0.1, -0.6, -0.9)
    nu: tuple[float, ...] = (0.1, -0.1, 0.1)
    theta: tuple[float, ...] = (0.6, -0.2, 0.8, 0.1, -0.3)
    misclass: float = 0.2
    y_star_sd: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.misclass < 0.5:
            raise ValueError("misclass must lie in [0, 0.5)")
        if self.y_star_sd < 0.0:
            raise ValueError("y_star_sd must be nonnegative")


@dataclass
class CompleteData:
    """Pre-masking sample with every gold-standard value observed."""

    x: NDArray
    a: NDArray
    a_star: NDArray
    y: NDArray
    y_star: NDArray

    def to_dataset(self) -> Dataset:
        n = self.x.shape[0]
        return Dataset.from_arrays(
            self.x,
            self.a_star,
            self.y_star,
            np.ones(n, dtype=np.int64),
            self.a.astype(float),
            self.y,
        )


def true_ate(params: DgpParams = DgpParams()) -> float:
    """Population ATE: tau plus the interaction terms at E[X] = 1/2."""
    return params.tau + 0.5 * float(np.sum(params.gamma))


def generate_complete(params: DgpParams, n: int, rng: np.random.Generator) -> CompleteData:
    """Draw a complete sample of (x, a, a_star, y, y_star)."""
    p = len(params.beta)
    x = rng.uniform(size=(n, p))
    a = (rng.uniform(size=n) < expit(x @ np.asarray(params.delta_ps))).astype(np.int64)
    flip = rng.uniform(size=n) < params.misclass
    a_star = np.where(flip, 1 - a, a)
    sd = np.sqrt(x.sum(axis=1))
    y = (
        x @ np.asarray(params.beta)
        + params.tau * a
        + a * (x @ np.asarray(params.gamma))
        + rng.normal(size=n) * sd
    )
    y_star = y + x @ np.asarray(params.nu) + rng.normal(size=n) * params.y_star_sd
    return CompleteData(x=x, a=a, a_star=a_star, y=y, y_star=y_star)


def apply_two_phase(
    complete: CompleteData,
    rho: float,
    theta: tuple[float, ...],
    rng: np.random.Generator,
) -> Dataset:
    """Draw validation indicators and mask gold values off the r=0 rows.

    Sampling probability: rho * expit(z theta) / mean(expit(z theta)),
    clamped to SAMPLING_CLAMP, with z = (x, a_star, y_star). The clamped
    probability is stored as the known per-row kappa.
    """
    z = np.column_stack([complete.x, complete.a_star.astype(float), complete.y_star])
    raw = expit(z @ np.asarray(theta))
    prob = np.clip(rho * raw / raw.mean(), *SAMPLING_CLAMP)
    r = (rng.uniform(size=prob.shape[0]) < prob).astype(np.int64)
    val = r == 1
    return Dataset.from_arrays(
        complete.x,
        complete.a_star,
        complete.y_star,
        r,
        np.where(val, complete.a.astype(float), np.nan),
        np.where(val, complete.y, np.nan),
        prob,
    )


# ----------------------------------------------------------------------
# replications
# ----------------------------------------------------------------------


def run_replication(
    config: ScenarioConfig,
    rep_index: int,
    params: DgpParams = DgpParams(),
) -> dict:
    """Generate one sample and run the whole method roster on it.

    Returns a JSON-ready record; a method that raises is recorded with its
    error message instead of failing the replication.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, rep_index]))
    complete = generate_complete(params, config.n, rng)
    masked = apply_two_phase(complete, config.rho, params.theta, rng)

    record: dict = {
        "rep": rep_index,
        "n": config.n,
        "rho": config.rho,
        "n_validated": int(masked.r.sum()),
        "methods": {},
    }

    def store(tag: str, fn):
        try:
            res = fn()
        except Exception as exc:  # noqa: BLE001 - per-method failures are data
            record["methods"][tag] = {"error": f"{type(exc).__name__}: {exc}"}
            return
        record["methods"][tag] = {
            "psi1": res.diagnostics.get("psi1"),
            "psi0": res.diagnostics.get("psi0"),
            "ate": res.point,
            "se": res.se,
            "ci_low": res.ci_low,
            "ci_high": res.ci_high,
            "error": None,
        }

    seed_folds = np.random.SeedSequence([config.master_seed, rep_index, 1])
    folds = make_folds(masked.n, config.folds, seed=seed_folds, strata=masked.r)

    def pair_ate(d, source):
        arms = aipw_pair(
            d, source, config.learner_menu, folds, config.ci_level, config.clip_eps
        )
        return ate_from_arms(arms[1], arms[0])

    # naive and oracle share folds so that with error-free measurements the
    # two fits see bitwise-identical inputs and produce identical points
    store("naive_aipw", lambda: pair_ate(masked, "starred"))
    complete_ds = complete.to_dataset()
    store("oracle_aipw", lambda: pair_ate(complete_ds, "gold"))

    try:
        nus = fit_nuisances(masked, config, folds)
    except Exception as exc:  # noqa: BLE001
        msg = f"{type(exc).__name__}: {exc}"
        for tag in ("pi1", "os1", "os2", "os2_eem", "tmle2", "ensemble"):
            record["methods"][tag] = {"error": msg}
        return record

    arm_res: dict[str, dict[int, EstimateResult]] = {}

    def store_arm(tag: str, fn):
        def build():
            arms = fn()
            arm_res[tag] = arms
            return ate_from_arms(arms[1], arms[0])

        store(tag, build)

    level = config.ci_level
    store_arm("pi1", lambda: {a: plugin1(masked, nus, a, level) for a in (0, 1)})
    store_arm("os1", lambda: {a: onestep1(masked, nus, a, level) for a in (0, 1)})
    store_arm("os2", lambda: {a: onestep2(masked, nus, a, "conventional", level) for a in (0, 1)})
    store_arm(
        "os2_eem", lambda: {a: onestep2(masked, nus, a, "eem", level) for a in (0, 1)}
    )
    store_arm("tmle2", lambda: {a: tmle2(masked, nus, a, level) for a in (0, 1)})

    def ensemble_arms():
        if "os1" not in arm_res or "os2_eem" not in arm_res:
            raise RuntimeError("ensemble requires os1 and os2_eem arm results")
        return {
            a: ensemble(arm_res["os1"][a], arm_res["os2_eem"][a], config.delta, level)
            for a in (0, 1)
        }

    store_arm("ensemble", ensemble_arms)
    return record


# ----------------------------------------------------------------------
# grids
# ----------------------------------------------------------------------


@dataclass
class MonteCarloSummary:
    """Aggregated performance of one method in one grid cell."""

    method: str
    n: int
    rho: float
    pct_bias: float
    rmse: float
    coverage: float
    mean_se: float
    reps_completed: int

    def to_row(self) -> list:
        return [
            self.method,
            self.n,
            self.rho,
            self.pct_bias,
            self.rmse,
            self.coverage,
            self.mean_se,
            self.reps_completed,
        ]


SUMMARY_COLUMNS = (
    "method",
    "n",
    "rho",
    "pct_bias",
    "rmse",
    "coverage",
    "mean_se",
    "reps_completed",
)


def summarize_records(
    records: list[dict],
    truth: float,
    n: int,
    rho: float,
    methods=SIMULATION_METHODS,
) -> list[MonteCarloSummary]:
    """Collapse per-replication records of one cell into summary rows."""
    out = []
    for method in methods:
        pts, ses, covered = [], [], []
        for rec in records:
            res = rec["methods"].get(method)
            if res is None or res.get("error") is not None:
                continue
            pts.append(res["ate"])
            ses.append(res["se"])
            covered.append(res["ci_low"] <= truth <= res["ci_high"])
        if pts:
            pts_a = np.asarray(pts)
            pct_bias = 100.0 * float(pts_a.mean() - truth) / truth
            rmse = float(np.sqrt(np.mean((pts_a - truth) ** 2)))
            coverage = float(np.mean(covered))
            mean_se = float(np.mean(ses))
        else:
            pct_bias = rmse = coverage = mean_se = float("nan")
        out.append(
            MonteCarloSummary(
                method=method,
                n=n,
                rho=rho,
                pct_bias=pct_bias,
                rmse=rmse,
                coverage=coverage,
                mean_se=mean_se,
                reps_completed=len(pts),
            )
        )
    return out


def _worker(args) -> tuple[int, int, dict]:
    cell_idx, rep_idx, cfg_dict, params = args
    config = ScenarioConfig(**cfg_dict)
    return cell_idx, rep_idx, run_replication(config, rep_idx, params)


def run_grid(
    configs: list[ScenarioConfig],
    params: DgpParams = DgpParams(),
    jobs: int = 1,
    progress=None,
) -> tuple[list[MonteCarloSummary], list[dict]]:
    """Run every cell of a grid and summarize per method.

    Returns (summaries, raw records); records carry cell coordinates so the
    raw stream can be re-aggregated. With jobs > 1 replications run in
    separate processes; results are aggregated in deterministic order.
    """
    tasks = [
        (ci, rep, cfg.to_dict(), params)
        for ci, cfg in enumerate(configs)
        for rep in range(cfg.reps)
    ]
    results: dict[tuple[int, int], dict] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for ci, rep, rec in pool.map(_worker, tasks, chunksize=4):
                results[(ci, rep)] = rec
                if progress is not None:
                    progress(len(results), len(tasks))
    else:
        for task in tasks:
            ci, rep, rec = _worker(task)
            results[(ci, rep)] = rec
            if progress is not None:
                progress(len(results), len(tasks))

    truth = true_ate(params)
    summaries: list[MonteCarloSummary] = []
    raw: list[dict] = []
    for ci, cfg in enumerate(configs):
        cell_records = [results[(ci, rep)] for rep in range(cfg.reps)]
        for rec in cell_records:
            rec_out = dict(rec)
            rec_out["cell"] = {"n": cfg.n, "rho": cfg.rho, "kappa_mode": cfg.kappa_mode}
            raw.append(rec_out)
        summaries.extend(summarize_records(cell_records, truth, cfg.n, cfg.rho))
    return summaries, raw
