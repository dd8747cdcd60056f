"""
Estimating equations in scope, each packaged as a MomentModel.

Every incomplete-data moment has the form

    psi = 1[T=t] (U(Y; theta1) - mu(X; theta)) / pi(t|X) + mu(X; theta) + V(theta)

where U, V come from a complete-data moment and mu is assembled from
regressions of observable labels on X among rows with T=t. Regressions whose
label depends on theta1 are fitted once, at a fixed initial value theta1'.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from defaults import JACOBIAN_RECIPES, SOLVER_HINTS
from errors import InvalidParameter, MissingInstrument

logger = logging.getLogger(__name__)


def _check_level(gamma):
    if not 0 < gamma < 1:
        raise InvalidParameter(f"level gamma must lie in (0, 1), got {gamma}")
    return float(gamma)


def _check_treatment_level(t):
    if t not in (0, 1):
        raise InvalidParameter(f"treatment level must be 0 or 1, got {t}")
    return int(t)


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """
    Per-row nuisance predictions plugged into a moment.

    Attributes
    ----------
    eta1 : array of shape (n, r1)
        Estimand-dependent regressions, localized at theta1'.
    eta2 : array of shape (n, r2)
        Propensities, pi(t|X) or the instrument propensity.
    nu : float, default=None
        Instrument effect on take-up (local quantiles only).
    aux : array of shape (n, r3), default=None
        Estimand-independent outcome regressions (expectiles).
    """

    eta1: np.ndarray
    eta2: np.ndarray
    nu: Optional[float] = None
    aux: Optional[np.ndarray] = None

    @property
    def n(self):
        return self.eta2.shape[0]

    def take(self, rows):
        return NuisanceValues(
            eta1=self.eta1[rows],
            eta2=self.eta2[rows],
            nu=self.nu,
            aux=None if self.aux is None else self.aux[rows],
        )

    @classmethod
    def constant(cls, n, eta1=(), eta2=(1.0,), nu=None, aux=None):
        """Nuisances that are the same on every row (handy for checks)."""
        return cls(
            eta1=np.tile(np.asarray(eta1, dtype=float), (n, 1)).reshape(n, len(eta1)),
            eta2=np.tile(np.asarray(eta2, dtype=float), (n, 1)).reshape(n, len(eta2)),
            nu=nu,
            aux=None if aux is None else np.tile(np.asarray(aux, dtype=float), (n, 1)).reshape(n, len(aux)),
        )


@dataclass(frozen=True)
class NuisanceTask:
    """
    One regression the estimand needs.

    Attributes
    ----------
    name : string
        Task name; learners may be configured per name.
    slot : string
        Learner slot the task falls back to.
    target : string
        "eta1", "eta2" or "aux": where the prediction goes.
    column : int
        Column of the target array.
    label : callable (table, theta1_prime) -> array of shape (n,)
    subset : callable (table) -> bool array, default=None
        Rows eligible for training; all rows when None.
    dependent : bool
        Whether the label depends on theta1'.
    probability : bool
        Whether predictions are probabilities (clip policy).
    binary : bool
        Whether both label classes must be present (propensity-type fits).
    transform : callable, default=None
        Applied to the (clipped) predictions, e.g. p -> 1 - p.
    features : string
        "covariates", or "covariates+instrument" for pi(X, W).
    """

    name: str
    slot: str
    target: str
    column: int
    label: Callable = field(compare=False)
    subset: Optional[Callable] = field(default=None, compare=False)
    dependent: bool = False
    probability: bool = False
    binary: bool = False
    transform: Optional[Callable] = field(default=None, compare=False)
    features: str = "covariates"


@dataclass(frozen=True)
class CompleteDataMoment:
    """
    Complete-data estimating equation P[U(Y; theta1) + V(theta)] = 0.

    Attributes
    ----------
    name : string
    gamma : float
    d, d1 : int
    u : callable (y array, theta1) -> array of shape (m, d)
    v : callable (theta array) -> array of shape (d,)
    indicator_first : bool
        Whether U_1 = 1[y <= theta1] and V_1 = -gamma, so the first equation is a
        right-continuous step function of theta1.
    """

    name: str
    gamma: float
    d: int
    d1: int
    u: Callable = field(compare=False)
    v: Callable = field(compare=False)
    indicator_first: bool = False


def quantile_complete(gamma):
    gamma = _check_level(gamma)
    return CompleteDataMoment(
        name="quantile", gamma=gamma, d=1, d1=1,
        u=lambda y, t1: (y <= t1).astype(float)[:, None],
        v=lambda theta: np.array([-gamma]),
        indicator_first=True,
    )


def quantile_cvar_complete(gamma):
    gamma = _check_level(gamma)
    return CompleteDataMoment(
        name="quantile_cvar", gamma=gamma, d=2, d1=1,
        u=lambda y, t1: np.column_stack([(y <= t1).astype(float),
                                         t1 + np.maximum(y - t1, 0.0) / (1.0 - gamma)]),
        v=lambda theta: np.array([-gamma, -theta[1]]),
        indicator_first=True,
    )


def expectile_complete(gamma):
    gamma = _check_level(gamma)
    return CompleteDataMoment(
        name="expectile", gamma=gamma, d=1, d1=1,
        u=lambda y, t1: ((1.0 - gamma) * (y - t1) - (1.0 - 2.0 * gamma) * np.maximum(y - t1, 0.0))[:, None],
        v=lambda theta: np.zeros(1),
    )


@dataclass(frozen=True)
class MomentModel:
    """
    An estimating equation ready for localized cross-fitting.

    Attributes
    ----------
    name : string
    d, d1 : int
        Equation dimension and dimension of theta1.
    gamma : float
    psi : callable (table, theta, nuisances) -> array of shape (n, d)
    nuisance_recipe : tuple of NuisanceTask
    jacobian_recipe : string
        "kde_quantile", "qcvar_block", "expectile_cdf" or "kde_lqte".
    solver_hint : string
        "monotone_step", "step_scan_then_linear" or "bisection".
    treatment_level : int
    step_terms : callable (table, nuisances) -> (weights, offset), default=None
        For step equations: mean psi_1(theta1) = offset + sum of weights over rows with Y <= theta1.
    requires_instrument : bool
    complete : CompleteDataMoment, default=None
    """

    name: str
    d: int
    d1: int
    gamma: float
    psi: Callable = field(compare=False)
    nuisance_recipe: Tuple[NuisanceTask, ...]
    jacobian_recipe: str
    solver_hint: str
    treatment_level: int = 1
    step_terms: Optional[Callable] = field(default=None, compare=False)
    requires_instrument: bool = False
    complete: Optional[CompleteDataMoment] = None

    def __post_init__(self):
        if self.jacobian_recipe not in JACOBIAN_RECIPES:
            raise InvalidParameter(f"unknown jacobian recipe '{self.jacobian_recipe}'")
        if self.solver_hint not in SOLVER_HINTS:
            raise InvalidParameter(f"unknown solver hint '{self.solver_hint}'")

    @property
    def dependent_tasks(self):
        return tuple(task for task in self.nuisance_recipe if task.dependent)

    def check_table(self, table):
        if self.requires_instrument and not table.has_instrument:
            raise MissingInstrument(f"estimand '{self.name}' needs an instrument column")

    def psi_row(self, table, i, theta, nuisances):
        """psi for a single row i, as a vector of length d."""
        return self.psi(table.subset([i]), np.atleast_1d(theta), nuisances.take([i]))[0]

    def mean_psi(self, table, theta, nuisances):
        return self.psi(table, np.atleast_1d(np.asarray(theta, dtype=float)), nuisances).mean(axis=0)


def _arm(table, t):
    return (table.treatment == t).astype(float)


def _inverse_weight(mask, prob):
    """mask / prob, zero wherever mask is zero (so prob may hit 0 there)."""
    mask = np.asarray(mask, dtype=float)
    return np.divide(mask, prob, out=np.zeros_like(mask), where=mask != 0)


def propensity_task(treatment_level):
    """Propensity pi(t|X), always fitted as a model of 1[T=1]."""
    flip = None if treatment_level == 1 else (lambda p: 1.0 - p)
    return NuisanceTask(name="propensity", slot="propensity", target="eta2", column=0,
                        label=lambda table, _: table.treatment.astype(float),
                        probability=True, binary=True, transform=flip)


def ipw_moment(complete, treatment_level=1):
    """
    Inverse propensity weighting equation: 1[T=t] U(Y; theta1) / pi(t|X) + V(theta).

    Parameters
    ----------
    complete : CompleteDataMoment
    treatment_level : int, default=1

    Returns
    -------
    moment : MomentModel
        Needs the propensity only; no estimand-dependent nuisance.
    """
    t = _check_treatment_level(treatment_level)

    def psi(table, theta, nuis):
        w = _inverse_weight(_arm(table, t), nuis.eta2[:, 0])
        return w[:, None] * complete.u(table.outcome, theta[0]) + complete.v(theta)[None, :]

    step_terms = None
    if complete.indicator_first:
        def step_terms(table, nuis):
            m = table.n
            return _inverse_weight(_arm(table, t), nuis.eta2[:, 0]) / m, -complete.gamma

    return MomentModel(
        name=f"ipw_{complete.name}", d=complete.d, d1=complete.d1, gamma=complete.gamma,
        psi=psi, nuisance_recipe=(propensity_task(t),),
        jacobian_recipe="kde_quantile" if complete.indicator_first else "expectile_cdf",
        solver_hint="monotone_step" if complete.indicator_first else "bisection",
        treatment_level=t, step_terms=step_terms, complete=complete,
    )


def incomplete_data_moment(complete, regressands, mu, jacobian_recipe, treatment_level=1, name=None):
    """
    General Neyman-orthogonal equation for a complete-data moment with missing outcomes.

    Parameters
    ----------
    complete : CompleteDataMoment
    regressands : tuple of NuisanceTask
        Outcome regressions among rows with T=t (the propensity task is added here).
    mu : callable (nuisances, theta) -> array of shape (n, d)
        Conditional mean of U(Y; theta1) given X and T=t, assembled from the regressions.
    jacobian_recipe : string
    treatment_level : int, default=1
    name : string, default=complete.name

    Returns
    -------
    moment : MomentModel
    """
    t = _check_treatment_level(treatment_level)

    def psi(table, theta, nuis):
        w = _inverse_weight(_arm(table, t), nuis.eta2[:, 0])
        m_val = mu(nuis, theta)
        return w[:, None] * (complete.u(table.outcome, theta[0]) - m_val) + m_val + complete.v(theta)[None, :]

    step_terms = None
    if complete.indicator_first:
        def step_terms(table, nuis):
            m = table.n
            w = _inverse_weight(_arm(table, t), nuis.eta2[:, 0])
            mu1 = nuis.eta1[:, 0]
            return w / m, float(np.mean(mu1 - w * mu1)) - complete.gamma

    return MomentModel(
        name=name or complete.name, d=complete.d, d1=complete.d1, gamma=complete.gamma,
        psi=psi, nuisance_recipe=tuple(regressands) + (propensity_task(t),),
        jacobian_recipe=jacobian_recipe,
        solver_hint="monotone_step" if complete.indicator_first else "bisection",
        treatment_level=t, step_terms=step_terms, complete=complete,
    )


def _treated_rows(t):
    return lambda table: table.treatment == t


def cdf_task(t, column=0):
    """Regression of 1[Y <= theta1'] on X among rows with T=t."""
    return NuisanceTask(name="cdf", slot="outcome", target="eta1", column=column,
                        label=lambda table, t1: (table.outcome <= t1).astype(float),
                        subset=_treated_rows(t), dependent=True, probability=True)


def excess_task(t, column):
    """Regression of max(Y - theta1', 0) on X among rows with T=t."""
    return NuisanceTask(name="excess", slot="outcome", target="eta1", column=column,
                        label=lambda table, t1: np.maximum(table.outcome - t1, 0.0),
                        subset=_treated_rows(t), dependent=True)


def quantile_moment(gamma, treatment_level=1):
    """
    Efficient equation for the gamma-quantile of Y(t).

    psi = 1[T=t](1[Y <= theta1] - eta1)/eta2 + eta1 - gamma

    Examples
    --------
    >>> mm = quantile_moment(0.5)
    >>> mm.d, mm.solver_hint
    (1, 'monotone_step')
    """
    t = _check_treatment_level(treatment_level)
    return incomplete_data_moment(
        quantile_complete(gamma), (cdf_task(t),),
        mu=lambda nuis, theta: nuis.eta1[:, :1],
        jacobian_recipe="kde_quantile", treatment_level=t,
    )


def quantile_cvar_moment(gamma, treatment_level=1):
    """
    Joint equation for the gamma-quantile (theta1) and CVaR (theta2) of Y(t).

    The second component is
    1[T=t](max(Y-theta1,0) - eta12)/((1-gamma) eta2) + theta1 + eta12/(1-gamma) - theta2,
    so theta2 has a closed form once theta1 is fixed.
    """
    t = _check_treatment_level(treatment_level)
    complete = quantile_cvar_complete(gamma)
    scale = 1.0 - complete.gamma
    return incomplete_data_moment(
        complete, (cdf_task(t, 0), excess_task(t, 1)),
        mu=lambda nuis, theta: np.column_stack([nuis.eta1[:, 0], theta[0] + nuis.eta1[:, 1] / scale]),
        jacobian_recipe="qcvar_block", treatment_level=t,
    )


def expectile_moment(gamma, treatment_level=1):
    """
    Efficient equation for the gamma-expectile of Y(t).

    psi = 1[T=t]/eta22 [(1-gamma)(Y - eta21) - (1-2gamma)(max(Y-theta1,0) - eta1)]
          + (1-gamma)(eta21 - theta1) - (1-2gamma) eta1

    eta1 is the localized regression of max(Y - theta1', 0), eta21 the
    regression of Y (both among T=t) and eta22 the propensity. The equation is
    continuous and piecewise linear in theta1.
    """
    t = _check_treatment_level(treatment_level)
    complete = expectile_complete(gamma)
    g = complete.gamma
    mean_task = NuisanceTask(name="outcome_mean", slot="regression", target="aux", column=0,
                             label=lambda table, _: table.outcome.astype(float),
                             subset=_treated_rows(t))
    return incomplete_data_moment(
        complete, (excess_task(t, 0), mean_task),
        mu=lambda nuis, theta: ((1.0 - g) * (nuis.aux[:, 0] - theta[0]) - (1.0 - 2.0 * g) * nuis.eta1[:, 0])[:, None],
        jacobian_recipe="expectile_cdf", treatment_level=t,
    )


def lqte_moment(gamma, treatment_level=1):
    """
    Neyman-orthogonal equation for the gamma-quantile of Y(t) among compliers.

    For t=1,
    psi = [eta11 - eta12 + W/pi (1[T=1,Y<=theta1] - eta11)
           - (1-W)/(1-pi) (1[T=1,Y<=theta1] - eta12)] / nu - gamma
    with eta1w the regression of 1[T=1, Y<=theta1'] among rows with W=w, pi the
    instrument propensity and nu the instrument's effect on take-up. For t=0 the
    labels use T=0 and the bracket changes sign.
    """
    gamma = _check_level(gamma)
    t = _check_treatment_level(treatment_level)
    sign = 1.0 if t == 1 else -1.0

    def joint_label(table, t1):
        return ((table.treatment == t) & (table.outcome <= t1)).astype(float)

    def psi(table, theta, nuis):
        if table.instrument is None:
            raise MissingInstrument("local quantiles need an instrument column")
        W = table.instrument.astype(float)
        pi = nuis.eta2[:, 0]
        ind = joint_label(table, theta[0])
        e11, e10 = nuis.eta1[:, 0], nuis.eta1[:, 1]
        core = e11 - e10 + _inverse_weight(W, pi) * (ind - e11) - _inverse_weight(1.0 - W, 1.0 - pi) * (ind - e10)
        return (sign * core / nuis.nu - gamma)[:, None]

    def step_terms(table, nuis):
        W = table.instrument.astype(float)
        pi = nuis.eta2[:, 0]
        e11, e10 = nuis.eta1[:, 0], nuis.eta1[:, 1]
        m = table.n
        jump = (table.treatment == t) * sign * (_inverse_weight(W, pi) - _inverse_weight(1.0 - W, 1.0 - pi)) / nuis.nu
        base = sign * (e11 - e10 - _inverse_weight(W, pi) * e11 + _inverse_weight(1.0 - W, 1.0 - pi) * e10) / nuis.nu
        return jump / m, float(np.mean(base)) - gamma

    tasks = (
        NuisanceTask(name="cdf_w1", slot="outcome", target="eta1", column=0, label=joint_label,
                     subset=lambda table: table.instrument == 1, dependent=True, probability=True),
        NuisanceTask(name="cdf_w0", slot="outcome", target="eta1", column=1, label=joint_label,
                     subset=lambda table: table.instrument == 0, dependent=True, probability=True),
        NuisanceTask(name="instrument_propensity", slot="instrument", target="eta2", column=0,
                     label=lambda table, _: table.instrument.astype(float),
                     probability=True, binary=True),
    )
    return MomentModel(
        name="lqte", d=1, d1=1, gamma=gamma, psi=psi, nuisance_recipe=tasks,
        jacobian_recipe="kde_lqte", solver_hint="step_scan_then_linear",
        treatment_level=t, step_terms=step_terms, requires_instrument=True,
    )


def moment_by_name(name, gamma, treatment_level=1):
    """Looks up an estimand by its configuration name."""
    factories = {
        "quantile": quantile_moment,
        "quantile_cvar": quantile_cvar_moment,
        "expectile": expectile_moment,
        "lqte": lqte_moment,
    }
    if name not in factories:
        raise InvalidParameter(f"unknown estimand '{name}'")
    return factories[name](gamma, treatment_level)


def with_treatment_level(moment, treatment_level):
    """Same estimand for the other arm (used for effects)."""
    return moment_by_name(moment.name, moment.gamma, treatment_level)


__all__ = [
    "NuisanceValues", "NuisanceTask", "CompleteDataMoment", "MomentModel",
    "quantile_complete", "quantile_cvar_complete", "expectile_complete",
    "ipw_moment", "incomplete_data_moment", "quantile_moment", "quantile_cvar_moment",
    "expectile_moment", "lqte_moment", "moment_by_name", "with_treatment_level", "propensity_task",
]
