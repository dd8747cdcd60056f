import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import (EmptyFile, InvalidKPrime, InvalidParameter, MissingColumn,
                    NonBinaryTreatment, NonFiniteValue, TooFewRows)

logger = logging.getLogger(__name__)


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """
    Immutable observations Z=(X,T,Y) or Z=(X,W,T,Y).

    Parameters
    ----------
    covariates : array of shape (n, p)
    treatment : array of shape (n,)
        Binary treatment flags.
    outcome : array of shape (n,)
    instrument : array of shape (n,), default=None
        Binary instrument flags.
    covariate_names : tuple of strings, default=()

    Example
    -------
    >>> tb = ObservationTable(covariates=[[0.1], [0.4]], treatment=[1, 0], outcome=[2.0, 3.0])
    >>> tb.n, tb.p
    (2, 1)
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    instrument: Optional[np.ndarray] = None
    covariate_names: Tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        n = X.shape[0]
        T = np.asarray(self.treatment, dtype=float).reshape(-1)
        Y = np.asarray(self.outcome, dtype=float).reshape(-1)
        if T.shape[0] != n or Y.shape[0] != n:
            raise InvalidParameter("covariates, treatment and outcome must have the same number of rows")
        if not np.all(np.isfinite(X)):
            raise NonFiniteValue("covariates contain missing or non-finite values")
        if not np.all(np.isfinite(Y)):
            raise NonFiniteValue("outcome contains missing or non-finite values")
        if not np.all((T == 0) | (T == 1)):
            raise NonBinaryTreatment("treatment entries must be exactly 0 or 1")
        object.__setattr__(self, "covariates", _frozen(X, float))
        object.__setattr__(self, "treatment", _frozen(T, np.int8))
        object.__setattr__(self, "outcome", _frozen(Y, float))
        if self.instrument is not None:
            W = np.asarray(self.instrument, dtype=float).reshape(-1)
            if W.shape[0] != n:
                raise InvalidParameter("instrument must have one entry per row")
            if not np.all((W == 0) | (W == 1)):
                raise NonBinaryTreatment("instrument entries must be exactly 0 or 1")
            object.__setattr__(self, "instrument", _frozen(W, np.int8))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    @property
    def has_instrument(self):
        return self.instrument is not None

    def subset(self, rows):
        """Returns a new table holding the given rows (in the given order)."""
        rows = np.asarray(rows, dtype=int)
        return ObservationTable(
            covariates=self.covariates[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            instrument=None if self.instrument is None else self.instrument[rows],
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True, eq=False)
class ColumnSchema:
    """
    Column-name mapping used to read a table.

    ``covariates=None`` means every column not named as treatment, outcome
    or instrument is a covariate (in file order).
    """

    treatment: str
    outcome: str
    covariates: Optional[Tuple[str, ...]] = None
    instrument: Optional[str] = None


def table_from_frame(frame, schema):
    """
    Builds an ObservationTable from a pandas DataFrame.

    Parameters
    ----------
    frame : pandas.DataFrame
    schema : ColumnSchema

    Returns
    -------
    table : ObservationTable
    """
    if frame.shape[0] == 0:
        raise EmptyFile("no data rows")
    named = [schema.treatment, schema.outcome] + ([schema.instrument] if schema.instrument else [])
    if schema.covariates is None:
        covariates = [c for c in frame.columns if c not in named]
    else:
        covariates = list(schema.covariates)
    for column in named + covariates:
        if column not in frame.columns:
            raise MissingColumn(f"column '{column}' not found (have: {', '.join(map(str, frame.columns))})")

    def numeric(column):
        values = frame[column]
        if not pd.api.types.is_numeric_dtype(values):
            raise NonFiniteValue(f"column '{column}' holds non-numeric values")
        arr = values.to_numpy(dtype=float)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"column '{column}' holds missing or non-finite values")
        return arr

    T = numeric(schema.treatment)
    if not np.all((T == 0) | (T == 1)):
        bad = T[(T != 0) & (T != 1)][0]
        raise NonBinaryTreatment(f"treatment column '{schema.treatment}' holds value {bad:g}")
    W = None
    if schema.instrument:
        W = numeric(schema.instrument)
        if not np.all((W == 0) | (W == 1)):
            raise NonBinaryTreatment(f"instrument column '{schema.instrument}' must hold 0/1 values")
    X = np.column_stack([numeric(c) for c in covariates]) if covariates else np.zeros((frame.shape[0], 0))
    return ObservationTable(covariates=X, treatment=T, outcome=numeric(schema.outcome),
                            instrument=W, covariate_names=tuple(covariates))


def load_csv(path, schema):
    """
    Reads a UTF-8 CSV file with a header row into an ObservationTable.

    Parameters
    ----------
    path : string or Path
    schema : ColumnSchema

    Returns
    -------
    table : ObservationTable
        Rows in file order.

    Examples
    --------
    >>> tb = load_csv("d.csv", ColumnSchema(treatment="T", outcome="Y"))
    """
    try:
        frame = pd.read_csv(path, encoding="utf-8", sep=",")
    except pd.errors.EmptyDataError as exc:
        raise EmptyFile(f"{path} is empty") from exc
    table = table_from_frame(frame, schema)
    logger.info("loaded %s: n=%d p=%d", path, table.n, table.p)
    return table


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """
    Random K-fold partition with the three-way index sets of each fold.

    Folds are numbered 0..K-1. ``h1[k]`` are the folds whose data build the
    initial estimate for fold k, ``h2[k]`` the folds whose data fit the
    localized nuisances.

    Attributes
    ----------
    K, Kprime : int
    permutation : array of shape (n,)
        Row indices in permuted order; fold k owns a contiguous block.
    fold_of : array of shape (n,)
        Fold of every row.
    h1, h2 : tuple of tuples of int
    seed : int
    """

    K: int
    Kprime: int
    permutation: np.ndarray
    fold_of: np.ndarray
    h1: Tuple[Tuple[int, ...], ...]
    h2: Tuple[Tuple[int, ...], ...]
    seed: int
    folds: Tuple[np.ndarray, ...] = field(repr=False, default=())

    @property
    def n(self):
        return self.permutation.shape[0]

    def fold_rows(self, k):
        """Row indices of fold k, sorted."""
        return self.folds[k]

    def rows_of(self, folds):
        """Sorted row indices of the union of the given folds."""
        if len(folds) == 0:
            return np.zeros(0, dtype=int)
        return np.sort(np.concatenate([self.folds[j] for j in folds]))

    def init_rows(self, k):
        """Rows of D_k^{C,1}."""
        return self.rows_of(self.h1[k])

    def nuisance_rows(self, k):
        """Rows of D_k^{C,2}."""
        return self.rows_of(self.h2[k])

    def out_of_fold_rows(self, k):
        """Rows of every fold except k."""
        return self.rows_of([j for j in range(self.K) if j != k])

    def same_as(self, other):
        return (self.K == other.K and self.Kprime == other.Kprime
                and np.array_equal(self.permutation, other.permutation))


def fold_index_sets(K, Kprime):
    """
    Computes the per-fold index sets (0-based).

    Returns
    -------
    h1, h2 : tuple of tuples
        h1[k] = {0..K'-1+[k<K']} minus k, h2[k] = the remaining folds minus k.

    Examples
    --------
    >>> h1, h2 = fold_index_sets(5, 2)
    >>> h1[0], h2[0]
    ((1, 2), (3, 4))
    """
    h1, h2 = [], []
    for k in range(K):
        cut = Kprime + (1 if k < Kprime else 0)
        h1.append(tuple(j for j in range(cut) if j != k))
        h2.append(tuple(j for j in range(cut, K) if j != k))
    return tuple(h1), tuple(h2)


def _stratified_permutation(rng, stratify):
    # shuffle each arm, then merge by fractional rank so every prefix keeps the global treated share
    flags = np.asarray(stratify).reshape(-1)
    keys = np.empty(flags.shape[0])
    groups = np.empty(flags.shape[0], dtype=int)
    order = []
    for value in (1, 0):
        members = rng.permutation(np.flatnonzero(flags == value))
        keys[members] = (np.arange(members.shape[0]) + 0.5) / max(members.shape[0], 1)
        groups[members] = 1 - value
        order.append(members)
    rows = np.concatenate(order)
    ranked = rows[np.lexsort((groups[rows], keys[rows]))]
    return ranked


def make_fold_plan(n, K, Kprime, seed, stratify=None):
    """
    Builds a random K-fold plan.

    Parameters
    ----------
    n : int
        Number of rows.
    K : int
        Number of folds (K >= 3).
    Kprime : int
        Number of folds used for the initial estimate (1 <= K' <= K-2).
    seed : int
    stratify : array of shape (n,), default=None
        Binary flags; when given, treated and untreated rows are interleaved so
        each fold's treated share matches the global share to within one unit.

    Returns
    -------
    plan : FoldPlan

    Examples
    --------
    >>> plan = make_fold_plan(10, 5, 2, seed=0)
    >>> [len(plan.fold_rows(k)) for k in range(5)]
    [2, 2, 2, 2, 2]
    """
    if K < 3 or Kprime < 1 or Kprime > K - 2:
        raise InvalidKPrime(f"need K >= 3 and 1 <= K' <= K-2, got K={K}, K'={Kprime}")
    if n < K:
        raise TooFewRows(f"{n} rows cannot fill {K} folds")
    rng = np.random.default_rng(seed)
    if stratify is not None:
        if len(stratify) != n:
            raise InvalidParameter("stratify flags must have one entry per row")
        permutation = _stratified_permutation(rng, stratify)
    else:
        permutation = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    folds = []
    for k in range(K):
        start = -(-(k * n) // K)
        stop = -(-((k + 1) * n) // K)
        members = permutation[start:stop]
        fold_of[members] = k
        members = np.sort(members)
        members.setflags(write=False)
        folds.append(members)
    h1, h2 = fold_index_sets(K, Kprime)
    permutation = np.asarray(permutation, dtype=int)
    permutation.setflags(write=False)
    fold_of.setflags(write=False)
    return FoldPlan(K=K, Kprime=Kprime, permutation=permutation, fold_of=fold_of,
                    h1=h1, h2=h2, seed=seed, folds=tuple(folds))
