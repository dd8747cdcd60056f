"""
Localized debiased machine learning.

One split runs: fold plan -> initial estimates on H_{k,1} folds -> nuisances
localized at those estimates on H_{k,2} folds -> grand-average (ldml2) or
per-fold (ldml1) solve -> Jacobian and sandwich variance. Repeated splits are
aggregated by inference.aggregate_splits.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq

from data import make_fold_plan
from defaults import AGGREGATES, NU_MIN, VARIANTS
from errors import (FOLD_ERRORS, ConfigError, DegenerateTreatmentArm, EmptyPoints, EmptySubsample,
                    InvalidParameter, KPrimeTooSmall, MissingInstrument, NuTooSmall, SolverNoCandidate)
from estimands import NuisanceValues, ipw_moment, lqte_moment
from helper import deriveSeed
from inference import (aggregate_splits, effect_difference, estimate_jacobian, estimate_nu_dml,
                       estimate_variance, influence_rows)
from learners import LearnerConfig, default_learner, fit, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LdmlConfig:
    """
    Settings of one LDML run.

    Parameters
    ----------
    K : int, default=5
    Kprime : int, default=2
        Folds used by the initial estimate (the rest fit localized nuisances).
    variant : string, default="ldml2"
        "ldml2" solves the grand-average equation, "ldml1" averages per-fold roots.
    splits : int, default=3
        Number of independent fold plans S.
    aggregate : string, default="median"
        "median", "mean" or "trimmed_mean".
    epsilon_tolerance : float, default=0.0
        Accepted excess of the solver residual over the best candidate.
    learners : dict, default={}
        Task name or slot -> LearnerConfig (or its dict form).
    seed : int, default=0
    stratify : bool, default=True
        Balance treated rows across folds.
    normalize_weights : bool, default=False
        Rescale propensities per fold so inverse weights average to one.
    trim : float, default=0.025
        Share trimmed at each end by aggregate="trimmed_mean".
    bandwidth : float, default=None
        Kernel Jacobian bandwidth; Silverman's rule when None.
    self_normalize : bool, default=True
    theta_init_override : float or sequence, default=None
        Skip the initial estimator and localize every fold at this value.
    threads : int, default=1
        Splits run concurrently on this many threads.
    """

    K: int = 5
    Kprime: int = 2
    variant: str = "ldml2"
    splits: int = 3
    aggregate: str = "median"
    epsilon_tolerance: float = 0.0
    learners: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    stratify: bool = True
    normalize_weights: bool = False
    trim: float = 0.025
    bandwidth: Optional[float] = None
    self_normalize: bool = True
    theta_init_override: Optional[Any] = None
    threads: int = 1

    def __post_init__(self):
        if self.K < 3 or not 1 <= self.Kprime <= self.K - 2:
            raise ConfigError(f"need K >= 3 and 1 <= Kprime <= K-2, got K={self.K}, Kprime={self.Kprime}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (expected one of {', '.join(VARIANTS)})")
        if self.aggregate not in AGGREGATES:
            raise ConfigError(f"unknown aggregate '{self.aggregate}' (expected one of {', '.join(AGGREGATES)})")
        if self.splits < 1:
            raise ConfigError("splits must be at least 1")
        if self.epsilon_tolerance < 0:
            raise ConfigError("epsilon_tolerance must be nonnegative")
        if not 0 <= self.trim < 0.5:
            raise ConfigError("trim must lie in [0, 0.5)")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        learners = {}
        for key, value in dict(self.learners).items():
            learners[key] = value if isinstance(value, LearnerConfig) else LearnerConfig.from_dict(value)
        object.__setattr__(self, "learners", learners)

    def learner_for(self, task_name, slot):
        return self.learners.get(task_name) or self.learners.get(slot) or default_learner(slot)

    def to_dict(self):
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["learners"] = {key: value.to_dict() for key, value in self.learners.items()}
        if out["theta_init_override"] is not None:
            out["theta_init_override"] = np.atleast_1d(out["theta_init_override"]).tolist()
        return out


@dataclass(frozen=True, eq=False)
class CrossFitState:
    """
    Everything fitted for one fold plan.

    Attributes
    ----------
    plan : FoldPlan
    theta_init : array of shape (K, d1)
    eta1_models : list of dict
        Per fold, task name -> FittedPredictor for estimand-dependent tasks.
    eta2_models : list of dict
        Per fold, task name -> FittedPredictor for the remaining tasks.
    nuisances : NuisanceValues
        Row i carries the predictions of the models of the fold owning i.
    provenance : dict
        Training rows: {"init": [rows per fold], "eta1": [{task: rows}], "eta2": [{task: rows}]}.
    raw_predictions : dict
        Task name -> untransformed, unnormalized predictions for all rows.
    nu_hat : float, default=None
    """

    plan: Any
    theta_init: np.ndarray
    eta1_models: List[Dict[str, Any]]
    eta2_models: List[Dict[str, Any]]
    nuisances: NuisanceValues
    provenance: Dict[str, Any]
    raw_predictions: Dict[str, np.ndarray] = field(default_factory=dict)
    nu_hat: Optional[float] = None

    def fold_nuisances(self, k):
        return self.nuisances.take(self.plan.fold_rows(k))


@dataclass(eq=False)
class SplitResult:
    """Estimate and diagnostics of one fold plan."""

    split: int
    seed: int
    theta: np.ndarray
    sigma: np.ndarray
    jacobian: Any
    influence: np.ndarray
    plan: Any
    theta_init: np.ndarray
    training_sizes: List[Dict[str, int]]
    residual: float
    nu_hat: Optional[float] = None
    propensity_fingerprint: str = ""
    state: Optional[CrossFitState] = field(default=None, repr=False)

    def to_dict(self):
        return {
            "split": self.split,
            "seed": self.seed,
            "theta": self.theta,
            "sigma": self.sigma,
            "jacobian": None if self.jacobian is None else self.jacobian.matrix,
            "bandwidth": None if self.jacobian is None else self.jacobian.bandwidth,
            "theta_init": self.theta_init,
            "training_sizes": self.training_sizes,
            "residual": self.residual,
            "nu_hat": self.nu_hat,
        }


# Solvers ----------------------------------------------------------------------


def solve_step_equation(points, offset=0.0, monotone=True):
    """
    Root of a right-continuous step equation over its jump points.

    g(theta) = offset + sum of w_i over points with y_i <= theta. The
    returned y is the observed point minimizing |g(y)|; ties go to the
    smallest y.

    Parameters
    ----------
    points : array of shape (m, 2)
        (y, jump-weight) pairs.
    offset : float, default=0.0
    monotone : bool, default=True
        All weights nonnegative, so g is nondecreasing and the sign change
        is located by binary search; otherwise every prefix sum is scanned.

    Returns
    -------
    theta1 : float

    Examples
    --------
    >>> solve_step_equation([(1, 1/3), (2, 1/3), (3, 1/3)], offset=-0.5)
    2.0
    >>> solve_step_equation([(1, 0.5), (2, -0.6), (3, 0.4)], offset=-0.1, monotone=False)
    2.0
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptyPoints("step equation has no jump points")
    if not np.all(np.isfinite(pts)):
        raise InvalidParameter("jump points and weights must be finite")
    ys, inverse = np.unique(pts[:, 0], return_inverse=True)
    g = offset + np.cumsum(np.bincount(inverse.reshape(-1), weights=pts[:, 1], minlength=ys.shape[0]))
    if monotone:
        above = int(np.searchsorted(g, 0.0, side="left"))
        candidates = []
        if above > 0:
            # first index of the plateau just below zero
            candidates.append(int(np.searchsorted(g, g[above - 1], side="left")))
        if above < g.shape[0]:
            candidates.append(above)
        best = min(candidates, key=lambda i: (abs(g[i]), i))
    else:
        best = int(np.argmin(np.abs(g)))
    return float(ys[best])


def _step_points(moment, table, nuisances):
    weights, offset = moment.step_terms(table, nuisances)
    nonzero = weights != 0
    if not np.any(nonzero):
        raise EmptyPoints(f"no rows carry weight in the {moment.name} step equation")
    points = np.column_stack([table.outcome[nonzero], weights[nonzero]])
    return points, offset


def _bracket(f, lo, hi):
    width = max(hi - lo, 1.0)
    for _ in range(60):
        if f(lo) >= 0:
            break
        lo -= width
        width *= 2
    width = max(hi - lo, 1.0)
    for _ in range(60):
        if f(hi) <= 0:
            break
        hi += width
        width *= 2
    if f(lo) < 0 or f(hi) > 0:
        raise SolverNoCandidate("no sign change of the continuous equation found")
    return lo, hi


def _solve_theta1(moment, table, nuisances):
    if moment.solver_hint == "bisection":
        def f(value):
            theta = np.zeros(moment.d)
            theta[0] = value
            return moment.mean_psi(table, theta, nuisances)[0]
        lo, hi = _bracket(f, float(table.outcome.min()), float(table.outcome.max()))
        if f(lo) == 0:
            return lo
        if f(hi) == 0:
            return hi
        return brentq(f, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
    points, offset = _step_points(moment, table, nuisances)
    monotone = moment.solver_hint == "monotone_step" and bool(np.all(points[:, 1] >= 0))
    return solve_step_equation(points, offset, monotone=monotone)


def solve_moment(moment, table, nuisances):
    """
    Solves the empirical equation mean psi(theta) = 0.

    theta1 comes from the step solver or bisection per ``moment.solver_hint``;
    the remaining components enter psi as -theta_j and are closed-form.

    Returns
    -------
    theta : array of shape (d,)
    residual : float
        Euclidean norm of the empirical moment at theta.
    """
    theta = np.zeros(moment.d)
    theta[0] = _solve_theta1(moment, table, nuisances)
    if moment.d > moment.d1:
        theta[moment.d1:] = moment.psi(table, theta, nuisances)[:, moment.d1:].mean(axis=0)
    residual = float(np.linalg.norm(moment.mean_psi(table, theta, nuisances)))
    return theta, residual


def _check_residual(moment, table, nuisances, theta, residual, tolerance):
    if moment.step_terms is None:
        return
    points, offset = _step_points(moment, table, nuisances)
    ys, inverse = np.unique(points[:, 0], return_inverse=True)
    g = offset + np.cumsum(np.bincount(inverse.reshape(-1), weights=points[:, 1], minlength=ys.shape[0]))
    best = float(np.min(np.abs(g)))
    first = abs(float(moment.mean_psi(table, theta, nuisances)[0]))
    if first > best + tolerance + 1e-12 * max(1.0, best):
        raise SolverNoCandidate(f"residual {first:.3e} exceeds the best candidate {best:.3e} + {tolerance:g}")
    logger.debug("solver residual %.3e (best candidate %.3e)", residual, best)


# Initial estimates ------------------------------------------------------------


def _features(table, task):
    if task.features == "covariates+instrument":
        return np.column_stack([table.covariates, table.instrument])
    return table.covariates


def _fit_task(task, table, train, learner, seed, theta1_prime=None):
    if train.shape[0] == 0:
        raise EmptySubsample(f"no training rows for nuisance '{task.name}'")
    labels = task.label(table, theta1_prime)[train]
    if task.binary and learner.kind not in ("oracle", "constant") and np.unique(labels).shape[0] < 2:
        raise DegenerateTreatmentArm(f"labels of '{task.name}' take a single value in its training rows")
    return fit(learner, _features(table, task)[train], labels, seed=seed, probability=task.probability)


def _predict_task(task, model, table, rows):
    raw = predict(model, _features(table, task)[rows])
    return raw, (task.transform(raw) if task.transform is not None else raw)


def _inner_propensities(table, plan, k, task, learner, seed):
    folds = plan.h1[k]
    rows, values = [], []
    for l in folds:
        train = plan.rows_of([j for j in folds if j != l])
        test = plan.fold_rows(l)
        model = _fit_task(task, table, train, learner, deriveSeed(seed, "init", k, l, task.name))
        rows.append(test)
        values.append(_predict_task(task, model, table, test)[1])
    return np.concatenate(rows), np.concatenate(values)


def fit_initial_ipw(table, plan, k, learner, moment, seed=0):
    """
    Cross-fitted inverse propensity weighting estimate from the H_{k,1} folds.

    For each l in H_{k,1}, a propensity model is fitted on the other H_{k,1}
    folds and evaluated on fold l; the pooled IPW equation is then solved.

    Parameters
    ----------
    table : ObservationTable
    plan : FoldPlan
    k : int
    learner : LearnerConfig
        Propensity learner.
    moment : MomentModel
        An IPW moment (see estimands.ipw_moment).
    seed : int, default=0

    Returns
    -------
    theta_init : array of shape (d1,)
    """
    if plan.Kprime < 2:
        raise KPrimeTooSmall(f"the IPW initial estimate needs Kprime >= 2, got {plan.Kprime}")
    task = moment.nuisance_recipe[0]
    rows, eta2 = _inner_propensities(table, plan, k, task, learner, seed)
    sub = table.subset(rows)
    nuisances = NuisanceValues(eta1=np.zeros((rows.shape[0], 0)), eta2=eta2[:, None])
    theta, _ = solve_moment(moment, sub, nuisances)
    logger.debug("fold %d: initial estimate %s from %d rows", k, theta[:moment.d1], rows.shape[0])
    return theta[:moment.d1]


def fit_initial_lqte_weighting(table, plan, k, learner, gamma, nu, treatment_level=1, seed=0):
    """
    Initial local quantile: the LQTE equation with both CDF regressions set to
    zero and cross-fitted instrument propensities, solved over H_{k,1}.

    Returns
    -------
    theta_init : array of shape (1,)
    """
    if table.instrument is None:
        raise MissingInstrument("the weighting initial estimate needs an instrument column")
    if plan.Kprime < 2:
        raise KPrimeTooSmall(f"the weighting initial estimate needs Kprime >= 2, got {plan.Kprime}")
    if nu is None or nu < NU_MIN:
        raise NuTooSmall(f"complier share {nu} is below {NU_MIN}")
    moment = lqte_moment(gamma, treatment_level)
    task = next(t for t in moment.nuisance_recipe if t.name == "instrument_propensity")
    rows, eta2 = _inner_propensities(table, plan, k, task, learner, seed)
    nuisances = NuisanceValues(eta1=np.zeros((rows.shape[0], 2)), eta2=eta2[:, None], nu=nu)
    theta, _ = solve_moment(moment, table.subset(rows), nuisances)
    return theta[:1]


# Localized nuisances ----------------------------------------------------------


def _width(tasks, target):
    columns = [task.column for task in tasks if task.target == target]
    return max(columns) + 1 if columns else 0


def fit_localized_nuisances(table, plan, theta_init, moment, config, seed=0, nu=None):
    """
    Fits every nuisance of ``moment`` per fold.

    Estimand-dependent tasks of fold k are labelled at theta_init[k] and trained
    on the H_{k,2} folds only; the other tasks train on all folds except k.
    Predictions are made for the rows of fold k.

    Parameters
    ----------
    table : ObservationTable
    plan : FoldPlan
    theta_init : array of shape (K, d1)
    moment : MomentModel
    config : LdmlConfig
        Supplies learners and the weight normalization flag.
    seed : int, default=0
        Split seed; each (fold, task) fit derives its own seed from it.
    nu : float, default=None

    Returns
    -------
    state : CrossFitState
    """
    moment.check_table(table)
    tasks = moment.nuisance_recipe
    n = table.n
    eta1 = np.zeros((n, _width(tasks, "eta1")))
    eta2 = np.zeros((n, _width(tasks, "eta2")))
    aux_width = _width(tasks, "aux")
    aux = np.zeros((n, aux_width)) if aux_width else None
    targets = {"eta1": eta1, "eta2": eta2, "aux": aux}
    raw = {task.name: np.zeros(n) for task in tasks}
    eta1_models, eta2_models = [], []
    provenance = {"init": [], "eta1": [], "eta2": []}
    theta_init = np.atleast_2d(np.asarray(theta_init, dtype=float))

    for k in range(plan.K):
        rows2 = plan.nuisance_rows(k)
        rows12 = plan.out_of_fold_rows(k)
        test = plan.fold_rows(k)
        models1, models2, used1, used2 = {}, {}, {}, {}
        for task in tasks:
            train = rows2 if task.dependent else rows12
            if task.subset is not None:
                train = train[task.subset(table)[train]]
            if train.shape[0] == 0:
                raise EmptySubsample(f"fold {k}: no training rows for nuisance '{task.name}'")
            learner = config.learner_for(task.name, task.slot)
            model = _fit_task(task, table, train, learner, deriveSeed(seed, k, task.name),
                              theta1_prime=theta_init[k][0])
            raw[task.name][test], targets[task.target][test, task.column] = _predict_task(task, model, table, test)
            if task.dependent:
                models1[task.name], used1[task.name] = model, train
            else:
                models2[task.name], used2[task.name] = model, train
            logger.debug("fold %d: %s trained on %d rows", k, task.name, train.shape[0])
        eta1_models.append(models1)
        eta2_models.append(models2)
        provenance["init"].append(plan.init_rows(k))
        provenance["eta1"].append(used1)
        provenance["eta2"].append(used2)

    if config.normalize_weights:
        if moment.requires_instrument:
            logger.warning("weight normalization is not defined for '%s'; ignored", moment.name)
        else:
            arm = (table.treatment == moment.treatment_level).astype(float)
            for k in range(plan.K):
                rows = plan.fold_rows(k)
                scale = np.mean(arm[rows] / eta2[rows, 0])
                if scale > 0:
                    eta2[rows, 0] *= scale

    nuisances = NuisanceValues(eta1=eta1, eta2=eta2, nu=nu, aux=aux)
    return CrossFitState(plan=plan, theta_init=theta_init, eta1_models=eta1_models, eta2_models=eta2_models,
                         nuisances=nuisances, provenance=provenance, raw_predictions=raw, nu_hat=nu)


# Running ----------------------------------------------------------------------


def _fingerprint(values):
    return hashlib.sha256(np.ascontiguousarray(values, dtype=float).tobytes()).hexdigest()[:16]


def _solve_variant(moment, table, state, variant):
    if variant == "ldml2":
        return solve_moment(moment, table, state.nuisances)
    roots = []
    for k in range(state.plan.K):
        rows = state.plan.fold_rows(k)
        roots.append(solve_moment(moment, table.subset(rows), state.nuisances.take(rows))[0])
    theta = np.mean(roots, axis=0)
    residual = float(np.linalg.norm(moment.mean_psi(table, theta, state.nuisances)))
    return theta, residual


def initial_estimates(table, plan, moment, config, seed, nu=None):
    """theta_init for every fold, shape (K, d1)."""
    if config.theta_init_override is not None:
        value = np.atleast_1d(np.asarray(config.theta_init_override, dtype=float))[:moment.d1]
        return np.tile(value, (plan.K, 1))
    if moment.requires_instrument:
        learner = config.learner_for("init_instrument_propensity", "instrument")
        return np.array([fit_initial_lqte_weighting(table, plan, k, learner, moment.gamma, nu,
                                                    moment.treatment_level, seed) for k in range(plan.K)])
    learner = config.learner_for("init_propensity", "propensity")
    initial = ipw_moment(moment.complete, moment.treatment_level)
    return np.array([fit_initial_ipw(table, plan, k, learner, initial, seed) for k in range(plan.K)])


def run_split(table, moment, config, split):
    """
    One fold plan end to end.

    Returns
    -------
    result : SplitResult
    """
    seed = deriveSeed(config.seed, "split", split)
    plan = make_fold_plan(table.n, config.K, config.Kprime, seed,
                          stratify=table.treatment if config.stratify else None)
    nu = None
    if moment.requires_instrument:
        moment.check_table(table)
        nu = estimate_nu_dml(table, plan, config.learner_for("instrument_propensity", "instrument"),
                             config.learner_for("treatment", "treatment"), seed=seed)
    theta_init = initial_estimates(table, plan, moment, config, seed, nu)
    state = fit_localized_nuisances(table, plan, theta_init, moment, config, seed=seed, nu=nu)
    theta, residual = _solve_variant(moment, table, state, config.variant)
    if config.variant == "ldml2":
        _check_residual(moment, table, state.nuisances, theta, residual, config.epsilon_tolerance)

    propensity = state.nuisances.eta2[:, 0]
    jacobian = estimate_jacobian(moment, table, theta,
                                 propensity=None if moment.requires_instrument else propensity,
                                 instrument_propensity=propensity if moment.requires_instrument else None,
                                 nu=nu, bandwidth=config.bandwidth, self_normalize=config.self_normalize)
    variance = estimate_variance(moment, table, theta, state.nuisances, jacobian)
    influence = influence_rows(moment.psi(table, theta, state.nuisances), jacobian)
    sizes = [{name: int(rows.shape[0]) for name, rows in {**state.provenance["eta1"][k],
                                                           **state.provenance["eta2"][k]}.items()}
             for k in range(plan.K)]
    propensity_task = "instrument_propensity" if moment.requires_instrument else "propensity"
    logger.info("split %d (seed %d): theta=%s", split, seed, np.array2string(theta, precision=6))
    return SplitResult(split=split, seed=seed, theta=theta, sigma=variance.sigma, jacobian=jacobian,
                       influence=influence, plan=plan, theta_init=theta_init, training_sizes=sizes,
                       residual=residual, nu_hat=nu,
                       propensity_fingerprint=_fingerprint(state.raw_predictions[propensity_task]),
                       state=state)


def _guarded_split(table, moment, config, split):
    try:
        return run_split(table, moment, config, split)
    except FOLD_ERRORS as exc:
        return exc


def run_splits(table, moment, config):
    """
    Runs all S splits (concurrently when config.threads > 1).

    Splits whose folds fail with EmptySubsample or DegenerateTreatmentArm are
    discarded and reported; when every split fails the first error is raised.

    Returns
    -------
    results : list of SplitResult
    discarded : list of dict
    """
    moment.check_table(table)
    outcomes = Parallel(n_jobs=config.threads, backend="threading")(
        delayed(_guarded_split)(table, moment, config, s) for s in range(config.splits))
    results, discarded = [], []
    for split, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            logger.warning("split %d discarded: %s", split, outcome)
            discarded.append({"split": split, **outcome.to_dict()})
        else:
            results.append(outcome)
    if not results:
        raise next(o for o in outcomes if isinstance(o, Exception))
    return results, discarded


def run_ldml(table, moment, config):
    """
    Localized debiased machine learning estimate.

    Parameters
    ----------
    table : ObservationTable
    moment : MomentModel
    config : LdmlConfig

    Returns
    -------
    report : EstimateReport
        ``report.splits`` holds the SplitResult of every kept split.

    Examples
    --------
    >>> report = run_ldml(table, quantile_moment(0.5), LdmlConfig(seed=7))  # doctest: +SKIP
    >>> report.theta, report.stderr  # doctest: +SKIP
    """
    results, discarded = run_splits(table, moment, config)
    return aggregate_splits(results, table.n, rule=config.aggregate, trim=config.trim,
                            estimand=moment.name, discarded=discarded)


def run_effect(table, moment_treated, moment_control, config):
    """
    Both arms on identical fold plans plus their difference.

    Fold plans and per-task seeds do not depend on the arm, so both arms fit
    the same propensity model; the difference shares it.

    Returns
    -------
    treated, control, effect : EstimateReport
    """
    treated = run_ldml(table, moment_treated, config)
    control = run_ldml(table, moment_control, config)
    kept = {s.split for s in treated.splits} & {s.split for s in control.splits}
    if len(kept) < len(treated.splits) or len(kept) < len(control.splits):
        logger.warning("effect uses the %d splits kept by both arms", len(kept))
        treated, control = (
            aggregate_splits([s for s in report.splits if s.split in kept], table.n, rule=config.aggregate,
                             trim=config.trim, estimand=report.estimand, discarded=report.discarded)
            for report in (treated, control))
    effect = effect_difference(treated, control, share_propensity=True, trim=config.trim)
    return treated, control, effect
