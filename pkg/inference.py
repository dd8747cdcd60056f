"""
Jacobians, sandwich variances, confidence intervals, effect differencing and
the complier share used by local quantiles.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.stats import norm

from defaults import AGGREGATES, JACOBIAN_MIN_SV, NU_MIN
from errors import (DegenerateTreatmentArm, FoldPlanMismatch, InvalidParameter, MissingInstrument,
                    NoContributingRows, NonPositiveBandwidth, NuTooSmall, PropensityMismatch,
                    SingularJacobian)
from helper import deriveSeed
from learners import default_learner, fit, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class JacobianEstimate:
    """
    Estimate of the derivative of the population moment at the truth.

    Attributes
    ----------
    matrix : array of shape (d, d)
    method : string
        "kde_quantile", "qcvar_block", "expectile_cdf" or "kde_lqte".
    bandwidth : float, default=None
        Kernel bandwidth (kernel methods only).
    """

    matrix: np.ndarray
    method: str
    bandwidth: Optional[float] = None

    def __post_init__(self):
        matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if not np.all(np.isfinite(matrix)):
            raise SingularJacobian(f"{self.method} Jacobian has non-finite entries")
        object.__setattr__(self, "matrix", matrix)

    @property
    def d(self):
        return self.matrix.shape[0]

    def inverse(self):
        """Inverse after checking the smallest singular value."""
        smallest = np.linalg.svd(self.matrix, compute_uv=False).min()
        if smallest <= JACOBIAN_MIN_SV:
            raise SingularJacobian(f"Jacobian smallest singular value {smallest:.3e} <= {JACOBIAN_MIN_SV:g}")
        return np.linalg.inv(self.matrix)


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    """Asymptotic variance: sqrt(N)(theta_hat - theta) is approximately N(0, sigma)."""

    sigma: np.ndarray
    n: int
    jacobian: Optional[JacobianEstimate] = None


@dataclass(frozen=True, eq=False)
class ConfidenceInterval:
    contrast: np.ndarray
    alpha: float
    estimate: float
    lower: float
    upper: float

    @property
    def level(self):
        return 1.0 - self.alpha


@dataclass(eq=False)
class EstimateReport:
    """
    Aggregated result of one estimation.

    Attributes
    ----------
    theta : array of shape (d,)
    sigma : array of shape (d, d)
        On the asymptotic scale; stderr = sqrt(diag(sigma) / n).
    n : int
    jacobian : array of shape (d, d)
        Aggregated the same way as sigma.
    alpha : float
    aggregate : string
    splits : list
        Per-split results that entered the aggregate.
    discarded : list of dict
        Splits dropped because a fold failed.
    estimand : string
    """

    theta: np.ndarray
    sigma: np.ndarray
    n: int
    jacobian: Optional[np.ndarray]
    alpha: float = 0.05
    aggregate: str = "median"
    splits: List = field(default_factory=list)
    discarded: List = field(default_factory=list)
    estimand: str = ""

    @property
    def stderr(self):
        return np.sqrt(np.clip(np.diag(self.sigma), 0.0, None) / self.n)

    @property
    def variance(self):
        return VarianceEstimate(sigma=self.sigma, n=self.n)

    def intervals(self):
        """Per-component confidence intervals at level 1 - alpha."""
        d = self.theta.shape[0]
        return [confidence_interval(self.theta, self.variance, np.eye(d)[j], self.alpha) for j in range(d)]

    def to_dict(self):
        cis = self.intervals()
        return {
            "estimand": self.estimand,
            "theta": self.theta,
            "jacobian": self.jacobian,
            "sigma": self.sigma,
            "stderr": self.stderr,
            "ci": {"lower": [c.lower for c in cis], "upper": [c.upper for c in cis], "alpha": self.alpha},
            "n": self.n,
            "aggregate": self.aggregate,
            "splits": [s.to_dict() if hasattr(s, "to_dict") else s for s in self.splits],
            "discarded_splits": self.discarded,
        }


# Bandwidths -------------------------------------------------------------------


def _weighted_quantile(values, weights, q):
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cdf = (np.cumsum(w) - 0.5 * w) / np.sum(w)
    return np.interp(q, cdf, v)


def silverman_bandwidth(values, weights=None):
    """
    Silverman's rule on a (possibly weighted) sample.

    h = 0.9 * min(sd, IQR / 1.34) * m^(-1/5) with m the number of values.
    When one spread measure is zero the other is used.
    """
    values = np.asarray(values, dtype=float)
    m = values.shape[0]
    if m == 0:
        raise NoContributingRows("bandwidth needs at least one value")
    if weights is None:
        weights = np.ones(m)
    weights = np.asarray(weights, dtype=float)
    total = np.sum(weights)
    if total <= 0:
        raise NonPositiveBandwidth("bandwidth weights must have a positive sum")
    mean = np.sum(weights * values) / total
    sd = np.sqrt(np.sum(weights * (values - mean) ** 2) / total)
    q75, q25 = _weighted_quantile(values, weights, [0.75, 0.25])
    iqr = q75 - q25
    if sd <= 0 and iqr <= 0:
        raise NonPositiveBandwidth("outcomes have zero spread; pass an explicit bandwidth")
    if sd <= 0 or iqr <= 0:
        logger.warning("interquartile range or sd is zero; bandwidth uses the other spread measure")
        sd, iqr = max(sd, iqr / 1.34), max(iqr, 1.34 * sd)
    return rule_bandwidth(sd, iqr, m)


def rule_bandwidth(sd, iqr, m):
    """
    0.9 min(sd, IQR/1.34) m^(-1/5).

    Examples
    --------
    >>> round(rule_bandwidth(1.0, 1.34, 32), 6)
    0.45
    """
    h = 0.9 * min(sd, iqr / 1.34) * m ** (-0.2)
    if not h > 0:
        raise NonPositiveBandwidth(f"bandwidth {h} is not positive")
    return h


# Jacobians --------------------------------------------------------------------


def _kernel_sum(outcome, weights, theta1, h):
    return np.sum(weights * norm.pdf((outcome - theta1) / h))


def estimate_jacobian_kde(table, propensity, theta1, bandwidth=None, self_normalize=True,
                          mode="treated", treatment_level=1, nu=None):
    """
    Inverse-propensity weighted kernel density of Y(t) at theta1.

    Parameters
    ----------
    table : ObservationTable
    propensity : array of shape (n,)
        Cross-fitted pi(t|X) for mode="treated"; cross-fitted instrument
        propensity pi(X) for mode="lqte".
    theta1 : float
    bandwidth : float, default=None
        Silverman's rule on the contributing outcomes when None.
    self_normalize : bool, default=True
        Divide by the mean inverse-propensity weight (treated mode only).
    mode : string, default="treated"
        "treated" estimates f_t(theta1); "lqte" estimates the complier density.
    treatment_level : int, default=1
    nu : float, default=None
        Complier share (lqte mode).

    Returns
    -------
    jacobian : JacobianEstimate
    """
    propensity = np.asarray(propensity, dtype=float)
    mask = table.treatment == treatment_level
    m = int(np.count_nonzero(mask))
    if m == 0:
        raise NoContributingRows(f"no rows with T={treatment_level} contribute to the density")
    N = table.n
    Y = table.outcome

    if mode == "treated":
        weights = np.divide(mask.astype(float), propensity, out=np.zeros(N), where=mask)
        h = bandwidth if bandwidth is not None else silverman_bandwidth(Y[mask], weights[mask])
        if not h > 0:
            raise NonPositiveBandwidth(f"bandwidth {h} is not positive")
        value = _kernel_sum(Y, weights, theta1, h) / (N * h)
        if self_normalize:
            value /= np.mean(weights)
        method = "kde_quantile"
    elif mode == "lqte":
        if table.instrument is None:
            raise MissingInstrument("complier density needs an instrument column")
        if nu is None:
            raise InvalidParameter("complier density needs nu")
        sign = 1.0 if treatment_level == 1 else -1.0
        W = table.instrument.astype(float)
        weights = sign * (W - propensity) / (propensity * (1.0 - propensity)) * mask
        h = bandwidth if bandwidth is not None else silverman_bandwidth(Y[mask])
        if not h > 0:
            raise NonPositiveBandwidth(f"bandwidth {h} is not positive")
        value = _kernel_sum(Y, weights, theta1, h) / (nu * N * h)
        method = "kde_lqte"
    else:
        raise InvalidParameter(f"unknown kernel Jacobian mode '{mode}'")
    logger.debug("%s Jacobian %.5g (h=%.4g, m=%d)", method, value, h, m)
    return JacobianEstimate(matrix=[[value]], method=method, bandwidth=float(h))


def qcvar_jacobian(density):
    return np.array([[density, 0.0], [0.0, -1.0]])


def expectile_jacobian(gamma, cdf_value):
    """-gamma - (1 - 2 gamma) F_t(theta1)."""
    return -gamma - (1.0 - 2.0 * gamma) * cdf_value


def estimate_jacobian_analytic(moment, table, propensity, theta, bandwidth=None, self_normalize=True):
    """
    Jacobian of the quantile+CVaR or expectile equation.

    Parameters
    ----------
    moment : MomentModel
    table : ObservationTable
    propensity : array of shape (n,)
        Cross-fitted pi(t|X).
    theta : array of shape (d,)

    Returns
    -------
    jacobian : JacobianEstimate
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    t = moment.treatment_level
    if moment.jacobian_recipe == "qcvar_block":
        kde = estimate_jacobian_kde(table, propensity, theta[0], bandwidth=bandwidth,
                                    self_normalize=self_normalize, treatment_level=t)
        return JacobianEstimate(matrix=qcvar_jacobian(kde.matrix[0, 0]), method="qcvar_block",
                                bandwidth=kde.bandwidth)
    if moment.jacobian_recipe == "expectile_cdf":
        mask = table.treatment == t
        if not np.any(mask):
            raise NoContributingRows(f"no rows with T={t} to estimate the CDF")
        weights = np.divide(mask.astype(float), propensity, out=np.zeros(table.n), where=mask)
        cdf = np.sum(weights * (table.outcome <= theta[0])) / np.sum(weights)
        return JacobianEstimate(matrix=[[expectile_jacobian(moment.gamma, cdf)]], method="expectile_cdf")
    raise InvalidParameter(f"no analytic Jacobian for '{moment.jacobian_recipe}'")


def estimate_jacobian(moment, table, theta, propensity=None, instrument_propensity=None, nu=None,
                      bandwidth=None, self_normalize=True):
    """Dispatches on moment.jacobian_recipe."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    recipe = moment.jacobian_recipe
    if recipe == "kde_quantile":
        return estimate_jacobian_kde(table, propensity, theta[0], bandwidth=bandwidth,
                                     self_normalize=self_normalize, treatment_level=moment.treatment_level)
    if recipe == "kde_lqte":
        return estimate_jacobian_kde(table, instrument_propensity, theta[0], bandwidth=bandwidth,
                                     mode="lqte", treatment_level=moment.treatment_level, nu=nu)
    return estimate_jacobian_analytic(moment, table, propensity, theta, bandwidth=bandwidth,
                                      self_normalize=self_normalize)


# Variance ---------------------------------------------------------------------


def _psd(sigma, what="sigma"):
    sigma = 0.5 * (sigma + sigma.T)
    values, vectors = np.linalg.eigh(sigma)
    scale = max(1.0, float(np.max(np.abs(values))))
    if values.min() < 0:
        if values.min() < -1e-12 * scale:
            logger.warning("%s was indefinite (min eigenvalue %.3e); eigenvalues floored at 0", what, values.min())
        sigma = (vectors * np.clip(values, 0.0, None)) @ vectors.T
        sigma = 0.5 * (sigma + sigma.T)
    return sigma


def influence_rows(psi_values, jacobian):
    """Rows J^-1 psi_i, shape (N, d)."""
    psi_values = np.asarray(psi_values, dtype=float)
    if psi_values.ndim == 1:
        psi_values = psi_values[:, None]
    return psi_values @ jacobian.inverse().T


def sandwich(psi_values, jacobian):
    """
    Sandwich variance (1/N) sum_i J^-1 psi_i psi_i' J^-T.

    Examples
    --------
    >>> sandwich(np.array([1.0, -1.0]), JacobianEstimate([[2.0]], "kde_quantile")).sigma
    array([[0.25]])
    """
    omega = influence_rows(psi_values, jacobian)
    sigma = _psd(omega.T @ omega / omega.shape[0])
    return VarianceEstimate(sigma=sigma, n=omega.shape[0], jacobian=jacobian)


def estimate_variance(moment, table, theta, nuisances, jacobian):
    """
    Plug-in variance with psi evaluated at theta and each row's own cross-fitted nuisances.

    Parameters
    ----------
    moment : MomentModel
    table : ObservationTable
    theta : array of shape (d,)
    nuisances : NuisanceValues
        Row i holds the predictions of the models of the fold owning row i.
    jacobian : JacobianEstimate

    Returns
    -------
    variance : VarianceEstimate
    """
    psi_values = moment.psi(table, np.atleast_1d(np.asarray(theta, dtype=float)), nuisances)
    return sandwich(psi_values, jacobian)


def confidence_interval(theta, variance, contrast=None, alpha=0.05):
    """
    Interval zeta'theta +/- z_{1-alpha/2} sqrt(zeta' sigma zeta / N).

    Examples
    --------
    >>> ci = confidence_interval([0.0], VarianceEstimate(np.eye(1), 100))
    >>> round(ci.upper, 6)
    0.195996
    """
    if not 0 < alpha < 1:
        raise InvalidParameter(f"alpha must lie in (0, 1), got {alpha}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    contrast = np.ones(1) if contrast is None else np.atleast_1d(np.asarray(contrast, dtype=float))
    if contrast.shape != theta.shape:
        raise InvalidParameter("contrast and theta differ in dimension")
    sigma = np.atleast_2d(variance.sigma)
    estimate = float(contrast @ theta)
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(max(float(contrast @ sigma @ contrast), 0.0) / variance.n)
    return ConfidenceInterval(contrast=contrast, alpha=alpha, estimate=estimate,
                              lower=estimate - half, upper=estimate + half)


# Aggregation over splits ------------------------------------------------------


def aggregate_splits(splits, n, rule="median", trim=0.025, alpha=0.05, estimand="", discarded=(), center=None):
    """
    Combines repeated-split estimates.

    mean:          theta = mean theta_s,
                   sigma = (1/S) sum_s [sigma_s + (n/S) D_s D_s'] with D_s = theta_s - theta
    median:        theta = median theta_s,
                   sigma = elementwise median of sigma_s + n D_s D_s'
    trimmed_mean:  drops floor(trim S) splits at each end (ordered by theta_s[0]), then mean.

    Parameters
    ----------
    splits : list
        Objects with ``theta``, ``sigma`` and ``jacobian`` (a JacobianEstimate or None).
    n : int
    rule : string, default="median"
    center : array of shape (d,), default=None
        Fixed point estimate; when given it replaces the aggregated theta and
        the deviations D_s are measured against it.

    Returns
    -------
    report : EstimateReport
    """
    if not splits:
        raise InvalidParameter("no split results to aggregate")
    kept = list(splits)
    if rule == "trimmed_mean":
        cut = int(np.floor(trim * len(kept)))
        if cut > 0 and len(kept) > 2 * cut:
            kept = sorted(kept, key=lambda s: float(np.atleast_1d(s.theta)[0]))[cut:len(kept) - cut]
    thetas = np.array([np.atleast_1d(s.theta) for s in kept], dtype=float)
    sigmas = np.array([np.atleast_2d(s.sigma) for s in kept], dtype=float)
    jacobians = [s.jacobian.matrix for s in kept if getattr(s, "jacobian", None) is not None]
    S = thetas.shape[0]

    if rule not in AGGREGATES:
        raise InvalidParameter(f"unknown aggregate rule '{rule}'")
    median = rule == "median"
    if center is None:
        theta = np.median(thetas, axis=0) if median else thetas.mean(axis=0)
    else:
        theta = np.atleast_1d(np.asarray(center, dtype=float))
        if theta.shape != thetas.shape[1:]:
            raise InvalidParameter("center and split estimates differ in dimension")
    dev = thetas - theta
    spread = sigmas + (n if median else n / S) * np.einsum("si,sj->sij", dev, dev)
    sigma = np.median(spread, axis=0) if median else np.mean(spread, axis=0)
    jacobian = None
    if jacobians:
        jacobian = np.median(jacobians, axis=0) if median else np.mean(jacobians, axis=0)
    return EstimateReport(theta=theta, sigma=_psd(sigma), n=int(n), jacobian=jacobian, alpha=alpha,
                          aggregate=rule, splits=list(splits), discarded=list(discarded), estimand=estimand)


# Effects ----------------------------------------------------------------------


def difference_variance(influence_treated, influence_control):
    """(1/N) sum omega_i omega_i' with omega_i the difference of the arms' influence rows."""
    omega = np.asarray(influence_treated, dtype=float) - np.asarray(influence_control, dtype=float)
    if omega.ndim == 1:
        omega = omega[:, None]
    return omega.T @ omega / omega.shape[0]


def effect_difference(report_treated, report_control, share_propensity=False, trim=0.025):
    """
    Effect tau = theta(1) - theta(0) with the joint influence of both arms.

    Both reports must come from the same data and identical fold plans. The
    point estimate is the difference of the aggregated arms; each split's
    variance is recomputed from the difference of influence rows and the
    splits' variances are aggregated around tau with the treated report's rule.

    Parameters
    ----------
    report_treated, report_control : EstimateReport
    share_propensity : bool, default=False
        Require that both arms used identical propensity models.
    trim : float, default=0.025
        Trim share of the trimmed_mean rule.

    Returns
    -------
    report : EstimateReport
    """
    if report_treated.n != report_control.n or len(report_treated.splits) != len(report_control.splits):
        raise FoldPlanMismatch("arms were estimated on different data or split counts")
    splits = []
    for one, zero in zip(report_treated.splits, report_control.splits):
        if not one.plan.same_as(zero.plan):
            raise FoldPlanMismatch(f"split {one.split}: arms use different fold plans")
        if share_propensity and one.propensity_fingerprint != zero.propensity_fingerprint:
            raise PropensityMismatch(f"split {one.split}: arms used different propensity models")
        splits.append(replace(one, theta=one.theta - zero.theta,
                              sigma=_psd(difference_variance(one.influence, zero.influence)),
                              influence=one.influence - zero.influence, jacobian=None))
    name = f"{report_treated.estimand}_effect" if report_treated.estimand else "effect"
    tau = np.atleast_1d(report_treated.theta) - np.atleast_1d(report_control.theta)
    return aggregate_splits(splits, report_treated.n, rule=report_treated.aggregate, trim=trim,
                            alpha=report_treated.alpha, estimand=name, center=tau)


# Complier share ---------------------------------------------------------------


def nu_dml_terms(W, T, pi_w, pi_xw, pi_x1, pi_x0):
    """Per-row AIPW terms of the effect of W on T."""
    W = np.asarray(W, dtype=float)
    pi_w = np.asarray(pi_w, dtype=float)
    return (W - pi_w) / (pi_w * (1.0 - pi_w)) * (np.asarray(T, dtype=float) - pi_xw) + pi_x1 - pi_x0


def estimate_nu_dml(table, plan, instrument_learner=None, treatment_learner=None, seed=0, rows=None):
    """
    Cross-fitted AIPW estimate of nu = E[T(1) - T(0)], the complier share.

    Parameters
    ----------
    table : ObservationTable
    plan : FoldPlan
    instrument_learner : LearnerConfig, default=slot default
        Model of W given X.
    treatment_learner : LearnerConfig, default=slot default
        Model of T given (X, W).
    seed : int, default=0
    rows : array, default=None
        Restrict to these rows (cross-fitting still uses the plan's folds).

    Returns
    -------
    nu : float
    """
    if table.instrument is None:
        raise MissingInstrument("nu needs an instrument column")
    instrument_learner = instrument_learner or default_learner("instrument")
    treatment_learner = treatment_learner or default_learner("treatment")
    X = table.covariates
    W = table.instrument.astype(float)
    T = table.treatment.astype(float)
    terms = np.zeros(table.n)
    for k in range(plan.K):
        train = plan.out_of_fold_rows(k)
        test = plan.fold_rows(k)
        if np.unique(W[train]).shape[0] < 2:
            raise DegenerateTreatmentArm(f"fold {k}: instrument takes a single value in training rows")
        pi_model = fit(instrument_learner, X[train], W[train], seed=deriveSeed(seed, "nu", k, "instrument"),
                       probability=True)
        t_model = fit(treatment_learner, np.column_stack([X[train], W[train]]), T[train],
                      seed=deriveSeed(seed, "nu", k, "treatment"), probability=True)
        Xk = X[test]
        terms[test] = nu_dml_terms(
            W[test], T[test],
            predict(pi_model, Xk),
            predict(t_model, np.column_stack([Xk, W[test]])),
            predict(t_model, np.column_stack([Xk, np.ones(test.shape[0])])),
            predict(t_model, np.column_stack([Xk, np.zeros(test.shape[0])])),
        )
    nu = float(np.mean(terms if rows is None else terms[rows]))
    logger.info("complier share nu=%.4f", nu)
    if nu < NU_MIN:
        raise NuTooSmall(f"estimated complier share {nu:.4f} is below {NU_MIN}")
    return nu
