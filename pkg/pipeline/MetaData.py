"""
Domain data model for multivariate meta-analysis: studies, datasets,
Fisher-z transforms, indicator matrices and parameter counting.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from pipeline.errors import ConsistencyError, DomainError, InfeasibleError

ArrayLike = Union[float, Sequence[float], np.ndarray]

DATASET_COLUMNS = ["study_id", "variate_id", "estimate", "std_err"]

MODELS = ("riley", "lin_chu", "lowdim")

# q is "reasonably in the range 2--10"
DEFAULT_Q_MAX = 10


@dataclass(frozen=True)
class Estimate:
    variate_id: str
    y: float
    se: float

    @property
    def variance(self) -> float:
        return self.se * self.se


@dataclass(frozen=True)
class Study:
    """
    Point estimates reported by a single study, on the Fisher-z scale.

    Args:
        study_id: Opaque study identifier
        estimates: One (variate_id, y, se) entry per reported variate
    """

    study_id: str
    estimates: Tuple[Estimate, ...]

    def __post_init__(self):
        estimates = tuple(
            e if isinstance(e, Estimate) else Estimate(*e) for e in self.estimates
        )
        object.__setattr__(self, "estimates", estimates)

        if not estimates:
            raise ConsistencyError(f"study '{self.study_id}' has no estimates")

        seen = set()
        for e in estimates:
            if e.variate_id in seen:
                raise ConsistencyError(
                    f"study '{self.study_id}' reports variate '{e.variate_id}' twice")
            seen.add(e.variate_id)
            if not math.isfinite(e.y):
                raise ConsistencyError(
                    f"study '{self.study_id}', variate '{e.variate_id}': estimate is not finite")
            if not (math.isfinite(e.se) and e.se > 0):
                raise ConsistencyError(
                    f"study '{self.study_id}', variate '{e.variate_id}': std_err must be positive and finite")

    @property
    def t(self) -> int:
        return len(self.estimates)

    @property
    def variate_ids(self) -> List[str]:
        return [e.variate_id for e in self.estimates]

    @property
    def y(self) -> np.ndarray:
        return np.array([e.y for e in self.estimates], dtype=float)

    @property
    def variances(self) -> np.ndarray:
        return np.array([e.variance for e in self.estimates], dtype=float)


@dataclass(frozen=True)
class MetaDataset:
    """
    A set of studies plus the lexicographically ordered list of all variates.
    """

    studies: Tuple[Study, ...]
    variates: Tuple[str, ...] = field(init=False)

    def __post_init__(self):
        studies = tuple(self.studies)
        if not studies:
            raise ConsistencyError("a dataset needs at least one study")
        ids = [s.study_id for s in studies]
        if len(set(ids)) != len(ids):
            raise ConsistencyError("duplicate study_id in dataset")
        object.__setattr__(self, "studies", studies)
        object.__setattr__(
            self, "variates", tuple(sorted({v for s in studies for v in s.variate_ids})))

    @property
    def m(self) -> int:
        return len(self.studies)

    @property
    def p(self) -> int:
        return len(self.variates)

    @property
    def n(self) -> int:
        return sum(s.t for s in self.studies)

    @property
    def t(self) -> List[int]:
        return [s.t for s in self.studies]

    @property
    def density(self) -> float:
        return self.n / (self.m * self.p)

    def variate_index(self) -> Dict[str, int]:
        return {v: k for k, v in enumerate(self.variates)}

    def by_variate(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        """Group estimates per variate as (y, variances) arrays in study order."""
        grouped: Dict[str, Tuple[list, list]] = {v: ([], []) for v in self.variates}
        for study in self.studies:
            for e in study.estimates:
                grouped[e.variate_id][0].append(e.y)
                grouped[e.variate_id][1].append(e.variance)
        return {v: (np.array(ys), np.array(vs)) for v, (ys, vs) in grouped.items()}

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "MetaDataset":
        missing = [c for c in DATASET_COLUMNS if c not in df.columns]
        if missing:
            raise ConsistencyError(f"dataset is missing columns: {missing}")

        studies = []
        for study_id, rows in df.groupby("study_id", sort=False):
            estimates = tuple(
                Estimate(str(r.variate_id), float(r.estimate), float(r.std_err))
                for r in rows.itertuples(index=False)
            )
            studies.append(Study(str(study_id), estimates))
        return cls(tuple(studies))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (s.study_id, e.variate_id, e.y, e.se)
            for s in self.studies
            for e in s.estimates
        ]
        return pd.DataFrame(rows, columns=DATASET_COLUMNS)


def _check_scalar_or_array(x: ArrayLike):
    arr = np.asarray(x, dtype=float)
    return arr, arr.ndim == 0


def fisher_z(r: ArrayLike):
    """
    Fisher's z transform (hyperbolic arctangent) of a correlation.

    Raises:
        DomainError: if any |r| >= 1
    """
    arr, scalar = _check_scalar_or_array(r)
    if not np.all(np.abs(arr) < 1):
        raise DomainError(f"fisher_z needs |r| < 1, got {r}")
    out = np.arctanh(arr)
    return float(out) if scalar else out


def inv_fisher_z(z: ArrayLike):
    """Back-transform from the Fisher-z scale to a correlation (tanh)."""
    arr, scalar = _check_scalar_or_array(z)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"inv_fisher_z needs finite input, got {z}")
    out = np.tanh(arr)
    return float(out) if scalar else out


def fisher_z_se(n_units: int) -> float:
    """Large-sample standard error of a Fisher-z transformed correlation."""
    if n_units <= 3:
        raise DomainError(f"fisher_z_se needs n_units >= 4, got {n_units}")
    return 1.0 / math.sqrt(n_units - 3)


def indicator_matrix(study: Study, variates: Sequence[str]) -> np.ndarray:
    """
    Build the t_i x p indicator matrix X_i for a study.

    Row j has a single 1 in the column of the j-th estimate's variate.
    """
    index = {v: k for k, v in enumerate(variates)}
    X = np.zeros((study.t, len(variates)))
    for j, e in enumerate(study.estimates):
        if e.variate_id not in index:
            raise ConsistencyError(
                f"study '{study.study_id}' reports unknown variate '{e.variate_id}'")
        X[j, index[e.variate_id]] = 1.0
    return X


def param_count(model: str, p: int, q: Optional[int] = None) -> int:
    """
    Number of parameters each model has to estimate.

    The low-dimensional count uses q(q+1)/2 free elements for the symmetric
    positive-definite q x q matrix.
    """
    if p < 1:
        raise DomainError(f"p must be >= 1, got {p}")
    if model == "riley":
        return p * p + p
    if model == "lin_chu":
        return p * (p + 3) // 2
    if model == "lowdim":
        if q is None or not (1 <= q < p):
            raise DomainError(f"lowdim needs 1 <= q < p, got q={q}, p={p}")
        return p + q * (q + 1) // 2
    raise DomainError(f"unknown model '{model}', expected one of {MODELS}")


def is_sparse(n: int, p: int) -> bool:
    return n < p * p + p


def select_q(n: int, p: int, q_max: int = DEFAULT_Q_MAX) -> int:
    """
    Largest q whose low-dimensional parameter count fits within n estimates.

    Raises:
        InfeasibleError: if not even q = 1 fits
    """
    if q_max < 1:
        raise DomainError(f"q_max must be >= 1, got {q_max}")
    best = None
    for q in range(1, min(q_max, p - 1) + 1):
        if param_count("lowdim", p, q) <= n:
            best = q
        else:
            break
    if best is None:
        raise InfeasibleError(
            f"no feasible q: n={n} estimates cannot support p={p} means plus a "
            f"covariance (need n >= p + 1 and p >= 2)")
    return best


def recommend_model(n: int, p: int, favor_precision: bool = True) -> str:
    """
    Decision aid for choosing a multivariate meta-analysis model.

    Returns:
        One of "riley", "lin_chu", "univariate" or "lowdim"
    """
    if not is_sparse(n, p):
        return "riley"
    if p < 5:
        return "lin_chu"
    if not favor_precision:
        return "univariate"
    return "lowdim"


def param_count_curve(p_values: Iterable[int], q_values: Sequence[int] = (4, 8)) -> pd.DataFrame:
    """Parameter counts per model over a range of p, as plot-ready rows."""
    rows = []
    for p in p_values:
        rows.append((p, "riley", None, param_count("riley", p)))
        rows.append((p, "lin_chu", None, param_count("lin_chu", p)))
        for q in q_values:
            if q < p:
                rows.append((p, "lowdim", q, param_count("lowdim", p, q)))
    return pd.DataFrame(rows, columns=["p", "model", "q", "n_params"])
