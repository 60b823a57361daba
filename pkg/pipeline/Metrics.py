"""
Comparison metrics between multivariate and univariate results: coverage,
log relative absolute bias, log relative interval length, cluster-bootstrap
regressions of the metrics, and SUCRA rankings.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binomtest

from pipeline.errors import ConsistencyError, DomainError, NumericalError

logger = logging.getLogger(__name__)

PREDICTORS = ("n_estimates", "n_variates")
RESPONSES = {"bias": "log_rel_bias", "length": "log_rel_length"}
MIN_CLUSTERS = 30
N_BOOT = 2000


@dataclass(frozen=True)
class ComparisonRow:
    """One CI-CrI pair: a variate of one simulated meta-analysis."""

    meta_id: str
    variate_id: str
    mu_true: float
    est_m: float
    est_u: float
    ci_m: Tuple[float, float]
    ci_u: Tuple[float, float]
    n_estimates: int
    n_variates: int

    def __post_init__(self):
        for name, (lo, hi) in (("ci_m", self.ci_m), ("ci_u", self.ci_u)):
            if lo > hi:
                raise ConsistencyError(
                    f"{self.meta_id}/{self.variate_id}: {name} is not ordered ({lo} > {hi})")


@dataclass(frozen=True)
class CoverageResult:
    proportion: float
    ci_low: float
    ci_high: float
    covered: int
    total: int

    def to_dict(self) -> dict:
        return {
            "proportion": self.proportion,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "covered": self.covered,
            "total": self.total,
        }


def proportion_with_ci(successes: int, total: int) -> CoverageResult:
    """Proportion with a Wilson 95% interval."""
    if total < 1:
        raise DomainError("a proportion needs at least one trial")
    ci = binomtest(successes, total).proportion_ci(confidence_level=0.95, method="wilson")
    return CoverageResult(successes / total, float(ci.low), float(ci.high), successes, total)


def _interval(row: ComparisonRow, side: str) -> Tuple[float, float]:
    if side == "m":
        return row.ci_m
    if side == "u":
        return row.ci_u
    raise DomainError(f"side must be 'm' or 'u', got '{side}'")


def coverage(rows: Sequence[ComparisonRow], side: str) -> CoverageResult:
    """Share of rows whose interval on `side` contains the true value."""
    if not rows:
        raise DomainError("coverage needs at least one row")
    covered = 0
    for row in rows:
        lo, hi = _interval(row, side)
        covered += int(lo <= row.mu_true <= hi)
    return proportion_with_ci(covered, len(rows))


def log_rel_abs_bias(row: ComparisonRow) -> Optional[float]:
    """
    log|mu - est_m| - log|mu - est_u|, or None when either error is exactly zero.
    """
    err_m = abs(row.mu_true - row.est_m)
    err_u = abs(row.mu_true - row.est_u)
    if err_m == 0 or err_u == 0:
        return None
    return math.log(err_m) - math.log(err_u)


def log_rel_length(row: ComparisonRow) -> Optional[float]:
    """log(width_m) - log(width_u), or None when either interval has zero width."""
    width_m = row.ci_m[1] - row.ci_m[0]
    width_u = row.ci_u[1] - row.ci_u[0]
    if width_m <= 0 or width_u <= 0:
        return None
    return math.log(width_m) - math.log(width_u)


def metric_frame(rows: Iterable[ComparisonRow]) -> pd.DataFrame:
    """One record per row with both log metrics and their exclusion flags."""
    records = []
    for row in rows:
        bias = log_rel_abs_bias(row)
        length = log_rel_length(row)
        records.append({
            "meta_id": row.meta_id,
            "variate_id": row.variate_id,
            "mu_true": row.mu_true,
            "est_m": row.est_m,
            "ci_m_low": row.ci_m[0],
            "ci_m_high": row.ci_m[1],
            "est_u": row.est_u,
            "ci_u_low": row.ci_u[0],
            "ci_u_high": row.ci_u[1],
            "covered_m": row.ci_m[0] <= row.mu_true <= row.ci_m[1],
            "covered_u": row.ci_u[0] <= row.mu_true <= row.ci_u[1],
            "log_rel_bias": np.nan if bias is None else bias,
            "log_rel_length": np.nan if length is None else length,
            "bias_excluded": bias is None,
            "length_excluded": length is None,
            "n_estimates": row.n_estimates,
            "n_variates": row.n_variates,
        })
    frame = pd.DataFrame.from_records(records)
    if not frame.empty:
        frame = frame.sort_values(["meta_id", "variate_id"], kind="stable").reset_index(drop=True)
    return frame


def _cluster_index(clusters: Sequence) -> List[np.ndarray]:
    codes, _ = pd.factorize(pd.Series(list(clusters)), sort=True)
    return [np.flatnonzero(codes == k) for k in range(codes.max() + 1)]


def mean_ratio(values: Sequence[float], clusters: Sequence, n_boot: int = N_BOOT,
               seed: int = 0) -> Dict[str, float]:
    """Exponentiated mean of a log metric with a cluster-bootstrap 95% interval."""
    values = np.asarray(values, dtype=float)
    groups = _cluster_index(clusters)
    rng = np.random.Generator(np.random.Philox(seed))
    boot = np.empty(n_boot)
    for b in range(n_boot):
        pick = rng.integers(0, len(groups), size=len(groups))
        idx = np.concatenate([groups[k] for k in pick])
        boot[b] = values[idx].mean()
    lo, hi = np.quantile(boot, [0.025, 0.975])
    return {
        "estimate": float(np.exp(values.mean())),
        "ci_low": float(np.exp(lo)),
        "ci_high": float(np.exp(hi)),
        "n": int(values.size),
    }


@dataclass
class RegressionResult:
    response: str
    predictors: Tuple[str, ...]
    coefficients: pd.DataFrame
    boot_draws: np.ndarray
    predictor_means: Dict[str, float]
    n_rows: int
    n_clusters: int
    n_boot_used: int

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "predictors": list(self.predictors),
            "n_rows": self.n_rows,
            "n_clusters": self.n_clusters,
            "n_boot_used": self.n_boot_used,
            "coefficients": self.coefficients.to_dict(orient="records"),
        }


def _ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(X, y, rcond=None)[0]


def regress_metric(frame: pd.DataFrame, response: str, predictors: Sequence[str] = PREDICTORS,
                   n_boot: int = N_BOOT, seed: int = 0, cluster_col: str = "meta_id") -> RegressionResult:
    """
    OLS of a log metric on the predictors with cluster-bootstrap 95% intervals.

    Args:
        frame: Output of metric_frame
        response: "bias" or "length"
        predictors: Columns used as covariates
        n_boot: Number of whole-cluster resamples
        seed: Seed of the resampling stream
        cluster_col: Column identifying clusters (meta-analyses)

    Returns:
        A RegressionResult with raw and exponentiated coefficients
    """
    if response not in RESPONSES:
        raise DomainError(f"response must be one of {list(RESPONSES)}, got '{response}'")
    column = RESPONSES[response]
    data = frame.dropna(subset=[column])
    groups = _cluster_index(data[cluster_col]) if len(data) else []
    if len(groups) < MIN_CLUSTERS:
        raise DomainError(f"regression needs >= {MIN_CLUSTERS} clusters, got {len(groups)}")

    X = np.column_stack([np.ones(len(data))] + [data[c].to_numpy(dtype=float) for c in predictors])
    y = data[column].to_numpy(dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise NumericalError(f"design for {column} on {list(predictors)} is rank-deficient")
    beta = _ols(X, y)

    rng = np.random.Generator(np.random.Philox(seed))
    draws = []
    for _ in range(n_boot):
        pick = rng.integers(0, len(groups), size=len(groups))
        idx = np.concatenate([groups[k] for k in pick])
        Xb = X[idx]
        if np.linalg.matrix_rank(Xb) < X.shape[1]:
            continue
        draws.append(_ols(Xb, y[idx]))
    if not draws:
        raise NumericalError("every bootstrap resample produced a rank-deficient design")
    draws = np.array(draws)
    if len(draws) < n_boot:
        logger.warning("Skipped %d rank-deficient bootstrap resamples", n_boot - len(draws))

    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0)
    terms = ["intercept"] + list(predictors)
    coefficients = pd.DataFrame({
        "term": terms,
        "estimate": beta,
        "ci_low": lo,
        "ci_high": hi,
        "exp_estimate": np.exp(beta),
        "exp_ci_low": np.exp(lo),
        "exp_ci_high": np.exp(hi),
        # relative change for 10 more estimates or variates
        "exp_per_10": np.exp(10 * beta),
        "exp_per_10_low": np.exp(10 * lo),
        "exp_per_10_high": np.exp(10 * hi),
    })
    return RegressionResult(
        response=column, predictors=tuple(predictors), coefficients=coefficients,
        boot_draws=draws, predictor_means={c: float(data[c].mean()) for c in predictors},
        n_rows=len(data), n_clusters=len(groups), n_boot_used=len(draws))


def relative_length_curve(result: RegressionResult, predictor: str, grid: Sequence[float]) -> pd.DataFrame:
    """
    Predicted mean ratio along one predictor, other predictors at their means,
    with pointwise 95% bootstrap bands.
    """
    if predictor not in result.predictors:
        raise DomainError(f"'{predictor}' is not a predictor of this regression")
    grid = np.asarray(grid, dtype=float)
    X = np.ones((grid.size, 1 + len(result.predictors)))
    for j, name in enumerate(result.predictors, start=1):
        X[:, j] = grid if name == predictor else result.predictor_means[name]
    beta = result.coefficients["estimate"].to_numpy()
    boot = X @ result.boot_draws.T
    lo, hi = np.quantile(boot, [0.025, 0.975], axis=1)
    return pd.DataFrame({
        "predictor": predictor,
        "value": grid,
        "estimate": np.exp(X @ beta),
        "band_low": np.exp(lo),
        "band_high": np.exp(hi),
    })


def rank_draws(mu_draws: np.ndarray) -> np.ndarray:
    """
    Per-draw ranks by correlation magnitude |tanh(mu)|; rank 1 is the largest.
    """
    mu_draws = np.atleast_2d(np.asarray(mu_draws, dtype=float))
    S, p = mu_draws.shape
    order = np.argsort(-np.abs(np.tanh(mu_draws)), axis=1, kind="stable")
    ranks = np.empty((S, p), dtype=int)
    ranks[np.arange(S)[:, None], order] = np.arange(1, p + 1)
    return ranks


def sucra(ranks: np.ndarray) -> np.ndarray:
    """Surface under the cumulative ranking curve, (p - mean rank) / (p - 1)."""
    ranks = np.asarray(ranks)
    if ranks.ndim != 2 or ranks.shape[1] < 2:
        raise ConsistencyError(f"rank draws must be S x p with p >= 2, got shape {ranks.shape}")
    p = ranks.shape[1]
    if not np.array_equal(np.sort(ranks, axis=1), np.broadcast_to(np.arange(1, p + 1), ranks.shape)):
        raise ConsistencyError("every rank draw must be a permutation of 1..p")
    return (p - ranks.mean(axis=0)) / (p - 1)


def prob_best(ranks: np.ndarray) -> np.ndarray:
    """Posterior probability that each variate has the largest magnitude."""
    return (np.asarray(ranks) == 1).mean(axis=0)


@dataclass
class ExclusionLedger:
    """Flow accounting of replicates and CI-CrI pairs through an evaluation."""

    replicates_total: int = 0
    replicates_missing: List[str] = field(default_factory=list)
    replicates_nonconverged: List[str] = field(default_factory=list)
    replicates_univariate_unusable: List[str] = field(default_factory=list)
    pairs_total: int = 0
    pairs_zero_width: int = 0
    pairs_analysed: int = 0
    bias_excluded: int = 0
    length_excluded: int = 0

    @property
    def replicates_analysed(self) -> int:
        excluded = set(self.replicates_missing) | set(self.replicates_nonconverged) \
            | set(self.replicates_univariate_unusable)
        return self.replicates_total - len(excluded)

    def check(self):
        if self.pairs_analysed + self.pairs_zero_width != self.pairs_total:
            raise ConsistencyError(
                f"pair accounting does not add up: {self.pairs_analysed} analysed + "
                f"{self.pairs_zero_width} excluded != {self.pairs_total}")
        return self

    def to_dict(self) -> dict:
        return {
            "replicates_total": self.replicates_total,
            "replicates_analysed": self.replicates_analysed,
            "replicates_missing": sorted(self.replicates_missing),
            "replicates_nonconverged": sorted(self.replicates_nonconverged),
            "replicates_univariate_unusable": sorted(self.replicates_univariate_unusable),
            "pairs_total": self.pairs_total,
            "pairs_zero_width": self.pairs_zero_width,
            "pairs_analysed": self.pairs_analysed,
            "bias_excluded": self.bias_excluded,
            "length_excluded": self.length_excluded,
        }

    def usability(self) -> Dict[str, dict]:
        """Share of replicates each arm could use, with Wilson intervals."""
        total = self.replicates_total
        if total < 1:
            return {}
        multivariate_bad = set(self.replicates_missing) | set(self.replicates_nonconverged)
        univariate_bad = set(self.replicates_missing) | set(self.replicates_univariate_unusable)
        return {
            "multivariate": proportion_with_ci(total - len(multivariate_bad), total).to_dict(),
            "univariate": proportion_with_ci(total - len(univariate_bad), total).to_dict(),
        }


def exclusion_accounting(replicate_ids: Sequence[str], missing: Sequence[str],
                         nonconverged: Sequence[str], univariate_unusable: Sequence[str],
                         pairs_total: int, pairs_zero_width: int,
                         frame: pd.DataFrame) -> ExclusionLedger:
    """
    Build the exclusion ledger of an evaluation run.

    Args:
        replicate_ids: Every replicate found on disk
        missing: Replicates without fit or univariate outputs
        nonconverged: Replicates whose multivariate fit did not converge
        univariate_unusable: Replicates whose univariate results had no usable variate
        pairs_total: Candidate CI-CrI pairs in the analysed replicates
        pairs_zero_width: Pairs dropped because the univariate interval had zero width
        frame: metric_frame output for the analysed pairs

    Returns:
        A checked ExclusionLedger
    """
    ledger = ExclusionLedger(
        replicates_total=len(replicate_ids),
        replicates_missing=list(missing),
        replicates_nonconverged=list(nonconverged),
        replicates_univariate_unusable=list(univariate_unusable),
        pairs_total=pairs_total,
        pairs_analysed=len(frame),
        pairs_zero_width=pairs_zero_width,
        bias_excluded=int(frame["bias_excluded"].sum()) if len(frame) else 0,
        length_excluded=int(frame["length_excluded"].sum()) if len(frame) else 0,
    )
    for name, count in (("missing", len(missing)), ("non-converged", len(nonconverged))):
        if count:
            logger.warning("Excluded %d %s replicates", count, name)
    return ledger.check()
