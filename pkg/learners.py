import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Optional, Tuple

import numpy as np
from scipy.special import expit
from sklearn.ensemble import GradientBoostingRegressor

from defaults import IRLS_MAX_ITER, IRLS_TOL, PROB_CLIP, learner_defaults, slot_defaults
from errors import (ConfigError, DimensionMismatch, EmptyTrainingSet, NonBinaryLabels, NonFiniteValue,
                    SingularDesign)

logger = logging.getLogger(__name__)

KINDS = ("logistic", "ridge", "gbt", "constant", "oracle")


@dataclass(frozen=True)
class LearnerConfig:
    """
    Hyperparameters of one supervised learner.

    Parameters
    ----------
    kind : string
        One of "logistic", "ridge", "gbt", "constant", "oracle".
    l2_penalty : float, default=1e-4
        Ridge penalty of logistic and ridge fits (intercept unpenalized).
    trees, depth, learning_rate, min_leaf
        Boosting hyperparameters (gbt only).
    oracle_fn : callable, default=None
        Function of one covariate row; required iff kind="oracle".
    clip : "auto", None or (lo, hi), default="auto"
        "auto" clips probability-type predictions of fitted learners to
        [0.01, 0.99] and leaves oracle predictions untouched.
    """

    kind: str
    l2_penalty: float = learner_defaults["l2_penalty"]
    trees: int = learner_defaults["trees"]
    depth: int = learner_defaults["depth"]
    learning_rate: float = learner_defaults["learning_rate"]
    min_leaf: int = learner_defaults["min_leaf"]
    oracle_fn: Optional[Callable[[np.ndarray], float]] = field(default=None, compare=False)
    clip: Any = "auto"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind '{self.kind}'")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty must be nonnegative")
        if self.trees < 0 or self.depth < 1 or self.min_leaf < 1:
            raise ConfigError("gbt needs trees >= 0, depth >= 1 and min_leaf >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if (self.kind == "oracle") != (self.oracle_fn is not None):
            raise ConfigError("oracle_fn must be given exactly when kind='oracle'")
        if self.clip not in ("auto", None):
            lo, hi = self.clip
            if not lo <= hi:
                raise ConfigError("clip range must satisfy lo <= hi")
            object.__setattr__(self, "clip", (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, values):
        """Builds a config from a JSON-style dict (unknown keys are rejected)."""
        values = dict(values)
        known = {f for f in cls.__dataclass_fields__ if f != "oracle_fn"}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown learner keys: {', '.join(sorted(unknown))}")
        if "kind" not in values:
            raise ConfigError("learner config needs a 'kind'")
        if values["kind"] == "oracle":
            raise ConfigError("oracle learners can only be built in code")
        if isinstance(values.get("clip"), list):
            values["clip"] = tuple(values["clip"])
        return cls(**values)

    def to_dict(self):
        out = asdict(self)
        out.pop("oracle_fn")
        return out

    def resolve_clip(self, probability):
        """Clip range actually applied to predictions of a task."""
        if self.clip == "auto":
            return PROB_CLIP if probability and self.kind != "oracle" else None
        return self.clip


def default_learner(slot):
    return LearnerConfig(kind=slot_defaults.get(slot, "gbt"))


@dataclass(frozen=True, eq=False)
class FittedPredictor:
    """
    A fitted learner.

    Attributes
    ----------
    kind : string
    params : object
        Learned state (coefficients, a boosting model, a constant or the oracle function).
    n_features : int
    clip_range : (lo, hi) or None
    """

    kind: str
    params: Any
    n_features: int
    clip_range: Optional[Tuple[float, float]] = None

    def predict(self, features):
        return predict(self, features)


def _design(features):
    return np.column_stack([np.ones(features.shape[0]), features])


def _fit_logistic(features, targets, l2_penalty):
    if not np.all((targets == 0) | (targets == 1)):
        raise NonBinaryLabels("logistic regression needs 0/1 labels")
    Z = _design(features)
    m, q = Z.shape
    penalty = np.full(q, l2_penalty)
    penalty[0] = 0.0
    def objective(b):
        z = Z @ b
        return np.mean(np.logaddexp(0.0, z) - targets * z) + 0.5 * np.sum(penalty * b * b)

    beta = np.zeros(q)
    current = objective(beta)
    for iteration in range(IRLS_MAX_ITER):
        prob = expit(Z @ beta)
        grad = Z.T @ (prob - targets) / m + penalty * beta
        if np.linalg.norm(grad) <= IRLS_TOL:
            break
        weights = prob * (1.0 - prob)
        hessian = (Z.T * weights) @ Z / m + np.diag(penalty) + 1e-12 * np.eye(q)
        step = np.linalg.solve(hessian, grad)
        # step halving keeps the penalized loss decreasing
        for _ in range(30):
            candidate = objective(beta - step)
            if candidate <= current:
                break
            step = 0.5 * step
        else:
            logger.debug("IRLS line search found no descent after %d iterations (|grad|=%.2e)",
                         iteration, np.linalg.norm(grad))
            break
        beta, current = beta - step, candidate
    else:
        logger.debug("IRLS stopped after %d iterations (|grad|=%.2e)", IRLS_MAX_ITER, np.linalg.norm(grad))
    return beta


def _fit_ridge(features, targets, l2_penalty):
    Z = _design(features)
    m, q = Z.shape
    penalty = np.full(q, l2_penalty * m)
    penalty[0] = 0.0
    if l2_penalty == 0 and np.linalg.matrix_rank(Z) < q:
        raise SingularDesign("ridge with l2_penalty=0 on a rank-deficient design")
    try:
        return np.linalg.solve(Z.T @ Z + np.diag(penalty), Z.T @ targets)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from exc


def fit(config, features, targets, seed=0, probability=False):
    """
    Fits a learner.

    Parameters
    ----------
    config : LearnerConfig
    features : array of shape (m, p)
    targets : array of shape (m,)
    seed : int, default=0
    probability : bool, default=False
        Whether the target is a probability; drives the "auto" clip policy.

    Returns
    -------
    model : FittedPredictor

    Example
    -------
    >>> model = fit(LearnerConfig(kind="constant"), np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]))
    >>> predict(model, np.zeros((1, 1)))
    array([2.])
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if features.shape[0] == 0 or targets.shape[0] == 0:
        raise EmptyTrainingSet("cannot fit a learner on zero rows")
    if features.shape[0] != targets.shape[0]:
        raise DimensionMismatch("features and targets differ in length")
    if not np.all(np.isfinite(targets)):
        raise NonFiniteValue("targets must be finite")
    p = features.shape[1]
    clip_range = config.resolve_clip(probability)

    if config.kind == "logistic":
        params = _fit_logistic(features, targets, config.l2_penalty)
    elif config.kind == "ridge":
        params = _fit_ridge(features, targets, config.l2_penalty)
    elif config.kind == "gbt":
        if config.trees == 0:
            params = float(np.mean(targets))
            return FittedPredictor("constant", params, p, clip_range)
        params = GradientBoostingRegressor(
            loss="squared_error",
            n_estimators=config.trees,
            max_depth=config.depth,
            learning_rate=config.learning_rate,
            min_samples_leaf=config.min_leaf,
            random_state=seed,
        ).fit(features, targets)
    elif config.kind == "constant":
        params = float(np.mean(targets))
    else:
        params = config.oracle_fn
    return FittedPredictor(config.kind, params, p, clip_range)


def predict(model, features):
    """
    Predicts with a fitted learner.

    Parameters
    ----------
    model : FittedPredictor
    features : array of shape (m, p)

    Returns
    -------
    values : array of shape (m,)
        Clipped to model.clip_range when set.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features.reshape(-1, 1)
    if features.shape[1] != model.n_features:
        raise DimensionMismatch(f"model trained on {model.n_features} features, got {features.shape[1]}")
    if model.kind == "logistic":
        values = expit(_design(features) @ model.params)
    elif model.kind == "ridge":
        values = _design(features) @ model.params
    elif model.kind == "gbt":
        values = model.params.predict(features)
    elif model.kind == "constant":
        values = np.full(features.shape[0], model.params)
    else:
        values = np.array([float(model.params(row)) for row in features])
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue("oracle function returned non-finite predictions")
    if model.clip_range is not None:
        lo, hi = model.clip_range
        clipped = np.count_nonzero((values < lo) | (values > hi))
        if clipped:
            logger.debug("clipped %d of %d predictions to [%g, %g]", clipped, values.shape[0], lo, hi)
        values = np.clip(values, lo, hi)
    return values
