"""
Simulation study: covariates uniform on [0,1]^20, probit propensity
Phi(3(1 - X1 - X3)), Y(1) normal around 1[X1 + X2 <= 1] with variance 2 X3.
Compares LDML with a cross-fitted IPW estimator and discretized DML.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import gaussian_kde, norm

from data import ObservationTable, make_fold_plan
from defaults import (MC_DRAWS, SCHEMA_VERSION, STUDY_DIM, STUDY_GAMMA, STUDY_NAME, STUDY_RUNS,
                      study_learners)
from engine import LdmlConfig, run_ldml, solve_moment
from errors import EmptySubsample, InvalidParameter, UnknownMethod, ZeroReps
from estimands import NuisanceValues, ipw_moment, quantile_complete, quantile_moment
from helper import deriveSeed
from inference import estimate_jacobian_kde, sandwich
from learners import LearnerConfig, default_learner, fit, predict

logger = logging.getLogger(__name__)

CONVENTIONS = ("variance", "sd")


@dataclass(frozen=True)
class DgpConfig:
    """
    Parameters
    ----------
    n : int
    seed : int
    variance_convention : string, default="variance"
        "variance" reads the noise parameter 2 X3 as a variance, "sd" as a standard deviation.
    p : int, default=20
    """

    n: int
    seed: int = 0
    variance_convention: str = "variance"
    p: int = STUDY_DIM

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameter("n must be at least 1")
        if self.p < 3:
            raise InvalidParameter("the design needs at least 3 covariates")
        if self.variance_convention not in CONVENTIONS:
            raise InvalidParameter(f"unknown variance convention '{self.variance_convention}'")


def _noise_scale(x3, variance_convention):
    return np.sqrt(2.0 * x3) if variance_convention == "variance" else 2.0 * x3


def true_propensity(x):
    """P(T=1 | X=x) for one covariate row."""
    return float(norm.cdf(3.0 * (1.0 - x[0] - x[2])))


def true_cdf(x, theta, variance_convention="variance"):
    """P(Y(1) <= theta | X=x) for one covariate row."""
    mean = 1.0 if x[0] + x[1] <= 1.0 else 0.0
    scale = float(_noise_scale(x[2], variance_convention))
    if scale == 0:
        return float(theta >= mean)
    return float(norm.cdf((theta - mean) / scale))


def oracle_learners(theta1_prime, variance_convention="variance"):
    """Learners returning the true propensity and the true CDF localized at theta1_prime."""
    return {
        "propensity": LearnerConfig(kind="oracle", oracle_fn=true_propensity),
        "cdf": LearnerConfig(kind="oracle",
                             oracle_fn=lambda x: true_cdf(x, theta1_prime, variance_convention)),
    }


def generate_dgp(config):
    """
    Draws one dataset.

    Y is recorded for every row; estimands only read it where T=1.

    Returns
    -------
    table : ObservationTable
    """
    rng = np.random.default_rng(config.seed)
    X = rng.uniform(size=(config.n, config.p))
    T = (rng.uniform(size=config.n) < norm.cdf(3.0 * (1.0 - X[:, 0] - X[:, 2]))).astype(int)
    Z = rng.standard_normal(config.n)
    Y = (X[:, 0] + X[:, 1] <= 1.0) + _noise_scale(X[:, 2], config.variance_convention) * Z
    return ObservationTable(covariates=X, treatment=T, outcome=Y)


@lru_cache(maxsize=64)
def exact_quantile(gamma, variance_convention="variance"):
    """
    gamma-quantile of Y(1) by quadrature.

    F(theta) = (G(theta) + G(theta - 1)) / 2 with G(y) = int_0^1 Phi(y / s(u)) du.
    """
    if not 0 < gamma < 1:
        raise InvalidParameter(f"gamma must lie in (0, 1), got {gamma}")

    def G(y):
        value, _ = quad(lambda u: norm.cdf(y / _noise_scale(u, variance_convention)), 0.0, 1.0,
                        epsabs=1e-13, epsrel=1e-12, limit=200)
        return value

    def F(theta):
        return 0.5 * G(theta) + 0.5 * G(theta - 1.0) - gamma

    return brentq(F, -20.0, 21.0, xtol=1e-12)


def true_quantile_oracle(gamma, mc_draws=MC_DRAWS, seed=0, variance_convention="variance", chunk=10 ** 6):
    """
    Monte-Carlo gamma-quantile of Y(1).

    Returns
    -------
    theta : float
    se : float
        sqrt(gamma (1 - gamma) / M) / f(theta), f from a Gaussian KDE on a subsample.
    """
    if mc_draws < 10 ** 6:
        raise InvalidParameter("the Monte-Carlo oracle needs at least 10**6 draws")
    rng = np.random.default_rng(seed)
    draws = []
    remaining = mc_draws
    while remaining > 0:
        m = min(chunk, remaining)
        U = rng.uniform(size=(m, 3))
        Z = rng.standard_normal(m)
        draws.append((U[:, 0] + U[:, 1] <= 1.0) + _noise_scale(U[:, 2], variance_convention) * Z)
        remaining -= m
    Y = np.concatenate(draws)
    theta = float(np.quantile(Y, gamma))
    density = float(gaussian_kde(Y[:20000])(theta)[0])
    se = np.sqrt(gamma * (1.0 - gamma) / mc_draws) / density
    logger.info("Monte-Carlo oracle: theta=%.6f se=%.2e (%d draws)", theta, se, mc_draws)
    return theta, float(se)


# Baselines --------------------------------------------------------------------


@dataclass(frozen=True)
class MethodEstimate:
    theta: float
    stderr: float


def _learner(learners, name, slot):
    learners = learners or {}
    value = learners.get(name) or learners.get(slot) or default_learner(slot)
    return value if isinstance(value, LearnerConfig) else LearnerConfig.from_dict(value)


def _crossfit_propensity(table, plan, learner, seed):
    eta2 = np.zeros(table.n)
    T = table.treatment.astype(float)
    for k in range(plan.K):
        train = plan.out_of_fold_rows(k)
        model = fit(learner, table.covariates[train], T[train], seed=deriveSeed(seed, k, "propensity"),
                    probability=True)
        eta2[plan.fold_rows(k)] = predict(model, table.covariates[plan.fold_rows(k)])
    return eta2


def baseline_ipw(table, gamma, K=5, learners=None, seed=0, bandwidth=None):
    """
    Cross-fitted inverse propensity weighting quantile of Y(1).

    Returns
    -------
    estimate : MethodEstimate
    """
    plan = make_fold_plan(table.n, K, 1, seed, stratify=table.treatment)
    eta2 = _crossfit_propensity(table, plan, _learner(learners, "propensity", "propensity"), seed)
    moment = ipw_moment(quantile_complete(gamma))
    nuisances = NuisanceValues(eta1=np.zeros((table.n, 0)), eta2=eta2[:, None])
    theta, _ = solve_moment(moment, table, nuisances)
    jacobian = estimate_jacobian_kde(table, eta2, theta[0], bandwidth=bandwidth)
    variance = sandwich(moment.psi(table, theta, nuisances), jacobian)
    return MethodEstimate(theta=float(theta[0]), stderr=float(np.sqrt(variance.sigma[0, 0] / table.n)))


def quantile_grid(outcome):
    """Distinct j/100 empirical quantiles of the pooled outcome, j = 1..99."""
    levels = np.arange(1, 100) / 100.0
    return np.unique(np.quantile(outcome, levels, method="inverted_cdf"))


def baseline_dml_d(table, gamma, K=5, learners=None, seed=0, bandwidth=None):
    """
    Discretized DML: the efficient quantile equation restricted to a grid of
    marginal quantiles, with the conditional CDF fitted at every grid point.

    Returns
    -------
    estimate : MethodEstimate
    """
    plan = make_fold_plan(table.n, K, 1, seed, stratify=table.treatment)
    grid = quantile_grid(table.outcome)
    propensity = _learner(learners, "propensity", "propensity")
    outcome = _learner(learners, "cdf", "outcome")
    eta2 = _crossfit_propensity(table, plan, propensity, seed)
    eta1 = np.zeros((table.n, grid.shape[0]))
    X, Y = table.covariates, table.outcome
    for k in range(plan.K):
        train = plan.out_of_fold_rows(k)
        train = train[table.treatment[train] == 1]
        if train.shape[0] == 0:
            raise EmptySubsample(f"fold {k}: no treated rows out of fold")
        test = plan.fold_rows(k)
        for j, point in enumerate(grid):
            model = fit(outcome, X[train], (Y[train] <= point).astype(float),
                        seed=deriveSeed(seed, k, "grid", j), probability=True)
            eta1[test, j] = predict(model, X[test])
    moment = quantile_moment(gamma)
    values = np.array([moment.mean_psi(table, [point], NuisanceValues(eta1=eta1[:, j:j + 1], eta2=eta2[:, None]))[0]
                       for j, point in enumerate(grid)])
    best = int(np.argmin(np.abs(values)))
    nuisances = NuisanceValues(eta1=eta1[:, best:best + 1], eta2=eta2[:, None])
    theta = np.array([grid[best]])
    jacobian = estimate_jacobian_kde(table, eta2, theta[0], bandwidth=bandwidth)
    variance = sandwich(moment.psi(table, theta, nuisances), jacobian)
    return MethodEstimate(theta=float(theta[0]), stderr=float(np.sqrt(variance.sigma[0, 0] / table.n)))


def _ldml(table, gamma, learners, seed):
    config = LdmlConfig(K=5, Kprime=2, splits=1, seed=seed, learners=learners or {})
    report = run_ldml(table, quantile_moment(gamma), config)
    return MethodEstimate(theta=float(report.theta[0]), stderr=float(report.stderr[0]))


METHODS = {
    "ldml": _ldml,
    "ipw": lambda table, gamma, learners, seed: baseline_ipw(table, gamma, learners=learners, seed=seed),
    "dml_d": lambda table, gamma, learners, seed: baseline_dml_d(table, gamma, learners=learners, seed=seed),
}


# Study ------------------------------------------------------------------------


@dataclass
class ReplicationReport:
    """Monte-Carlo summary of one method at one sample size."""

    method: str
    n: int
    reps: int
    theta_true: float
    estimates: List[float] = field(default_factory=list)
    stderrs: List[float] = field(default_factory=list)
    lower: List[float] = field(default_factory=list)
    upper: List[float] = field(default_factory=list)
    mse: float = 0.0
    mse_se: float = 0.0
    coverage: float = 0.0
    coverage_se: float = 0.0

    def summarize(self):
        est = np.asarray(self.estimates)
        errors = (est - self.theta_true) ** 2
        covered = (np.asarray(self.lower) <= self.theta_true) & (self.theta_true <= np.asarray(self.upper))
        self.mse = float(errors.mean())
        self.mse_se = float(errors.std(ddof=1) / np.sqrt(self.reps)) if self.reps > 1 else 0.0
        self.coverage = float(covered.mean())
        self.coverage_se = float(np.sqrt(self.coverage * (1.0 - self.coverage) / self.reps))
        return self

    def to_dict(self):
        return {
            "method": self.method, "n": self.n, "reps": self.reps, "theta_true": self.theta_true,
            "mse": self.mse, "mse_se": self.mse_se, "coverage": self.coverage, "coverage_se": self.coverage_se,
            "estimates": self.estimates, "stderrs": self.stderrs, "lower": self.lower, "upper": self.upper,
        }


def replicate(method, table, gamma, learners=None, seed=0, runs=STUDY_RUNS):
    """
    Runs a method ``runs`` times with fresh fold seeds.

    theta is the median of the runs; its standard error is the median of the
    runs' standard errors plus the runs' standard deviation over sqrt(runs).

    Returns
    -------
    estimate : MethodEstimate
    """
    if method not in METHODS:
        raise UnknownMethod(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")
    results = [METHODS[method](table, gamma, learners, deriveSeed(seed, method, "run", r)) for r in range(runs)]
    thetas = np.array([r.theta for r in results])
    stderrs = np.array([r.stderr for r in results])
    spread = thetas.std(ddof=1) / np.sqrt(runs) if runs > 1 else 0.0
    return MethodEstimate(theta=float(np.median(thetas)), stderr=float(np.median(stderrs) + spread))


def _one_replication(methods, n, rep, gamma, seed, learners, variance_convention, runs):
    table = generate_dgp(DgpConfig(n=n, seed=deriveSeed(seed, "data", n, rep), variance_convention=variance_convention))
    return [replicate(method, table, gamma, learners, deriveSeed(seed, method, n, rep), runs) for method in methods]


def run_study(methods, n_grid, reps, gamma=STUDY_GAMMA, seed=0, learners=None, threads=1,
              variance_convention="variance", runs=STUDY_RUNS, theta_true=None):
    """
    Monte-Carlo comparison of estimators of the gamma-quantile of Y(1).

    Every replication draws one dataset shared by all methods; each method is
    run ``runs`` times on it (see ``replicate``) and its 95% interval is
    estimate +/- 1.96 stderr.

    Parameters
    ----------
    methods : list of string
        Subset of "ldml", "ipw", "dml_d".
    n_grid : list of int
    reps : int
    gamma : float, default=2/3
    seed : int, default=0
    learners : dict, default=study learners
    threads : int, default=1
        Replications run concurrently on this many threads.
    variance_convention : string, default="variance"
    runs : int, default=3
    theta_true : float, default=exact quantile

    Returns
    -------
    reports : list of ReplicationReport
        Ordered by n, then by method.
    """
    if reps < 1:
        raise ZeroReps("reps must be at least 1")
    for method in methods:
        if method not in METHODS:
            raise UnknownMethod(f"unknown method '{method}' (expected one of {', '.join(METHODS)})")
    learners = study_learners if learners is None else learners
    if theta_true is None:
        theta_true = exact_quantile(gamma, variance_convention)
    z = norm.ppf(0.975)
    reports = []
    for n in n_grid:
        logger.info("study cell n=%d: %d replications of %s", n, reps, ", ".join(methods))
        cells = Parallel(n_jobs=threads, backend="threading")(
            delayed(_one_replication)(methods, n, rep, gamma, seed, learners, variance_convention, runs)
            for rep in range(reps))
        for i, method in enumerate(methods):
            report = ReplicationReport(method=method, n=n, reps=reps, theta_true=theta_true)
            for cell in cells:
                est = cell[i]
                report.estimates.append(est.theta)
                report.stderrs.append(est.stderr)
                report.lower.append(est.theta - z * est.stderr)
                report.upper.append(est.theta + z * est.stderr)
            reports.append(report.summarize())
            logger.info("n=%d %s: mse=%.3e coverage=%.3f", n, method, report.mse, report.coverage)
    return reports


def study_report(reports, gamma, seed, variance_convention="variance", study=STUDY_NAME):
    """JSON-ready study document: one entry per (method, n) plus per-method arrays for plotting."""
    by_method = {}
    for r in reports:
        entry = by_method.setdefault(r.method, {"n": [], "mse": [], "mse_se": [], "coverage": [], "coverage_se": []})
        for key in entry:
            entry[key].append(getattr(r, key))
    return {
        "schema_version": SCHEMA_VERSION,
        "study": study,
        "gamma": gamma,
        "seed": seed,
        "variance_convention": variance_convention,
        "theta_true": reports[0].theta_true if reports else None,
        "methods": by_method,
        "reports": [r.to_dict() for r in reports],
    }


__all__ = [
    "DgpConfig", "generate_dgp", "true_propensity", "true_cdf", "oracle_learners", "exact_quantile",
    "true_quantile_oracle", "MethodEstimate", "baseline_ipw", "baseline_dml_d", "quantile_grid",
    "ReplicationReport", "replicate", "run_study", "study_report",
]
