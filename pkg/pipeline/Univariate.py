"""
Per-variate random-effects meta-analysis with REML between-study variance.
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq, minimize_scalar
from scipy.stats import norm

from pipeline.MetaData import MetaDataset
from pipeline.errors import DomainError

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["variate_id", "k", "estimate", "se", "ci_low", "ci_high", "tau2", "i2", "flag"]

FLAG_SINGLETON = "singleton"
FLAG_ZERO_WIDTH = "zero_width"


@dataclass(frozen=True)
class UnivariateResult:
    variate_id: str
    k: int
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    tau2: float
    i2: float
    flag: str = ""

    @property
    def usable(self) -> bool:
        return self.flag != FLAG_ZERO_WIDTH


class REMLEstimator:
    """
    Restricted maximum likelihood for the between-study variance tau^2.

    The maximum is bracketed on a coarse grid over [0, upper], refined with a
    bounded scalar minimizer and polished by root-finding on the REML score.
    """

    # CONFIG
    GRID_POINTS = 200
    UPPER_FACTOR = 10.0
    MAX_EXPANSIONS = 20
    XTOL = 1e-14
    RTOL = 1e-12

    def __init__(self, y, v):
        self.y = np.asarray(y, dtype=float)
        self.v = np.asarray(v, dtype=float)
        if self.y.shape != self.v.shape or self.y.ndim != 1:
            raise DomainError(f"y and v must be vectors of equal length, got {self.y.shape} and {self.v.shape}")
        if self.y.size < 2:
            raise DomainError(f"REML needs k >= 2 estimates, got k={self.y.size}")
        if not np.all(self.v > 0):
            raise DomainError("sampling variances must be positive")

    def _weights(self, tau2: float) -> Tuple[np.ndarray, float]:
        w = 1.0 / (self.v + tau2)
        return w, float(np.sum(w * self.y) / np.sum(w))

    def objective(self, tau2: float) -> float:
        """Restricted log-likelihood up to an additive constant."""
        w, y_hat = self._weights(tau2)
        return float(-0.5 * np.sum(np.log(self.v + tau2)) - 0.5 * np.log(np.sum(w))
                     - 0.5 * np.sum(w * (self.y - y_hat) ** 2))

    def score(self, tau2: float) -> float:
        w, y_hat = self._weights(tau2)
        sw = np.sum(w)
        return float(0.5 * (-sw + np.sum(w ** 2) / sw + np.sum(w ** 2 * (self.y - y_hat) ** 2)))

    def _upper(self) -> float:
        upper = self.UPPER_FACTOR * float(np.var(self.y, ddof=1))
        # the maximum may sit beyond the first guess when v is tiny; widen until it is bracketed
        for _ in range(self.MAX_EXPANSIONS):
            if self.score(upper) < 0:
                break
            upper *= 2.0
        return upper

    def estimate(self) -> float:
        if np.ptp(self.y) == 0:
            return 0.0

        upper = self._upper()
        grid = np.linspace(0.0, upper, self.GRID_POINTS + 1)
        values = np.array([self.objective(t) for t in grid])
        i = int(np.argmax(values))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]

        if i == 0 and self.score(0.0) <= 0:
            return 0.0

        res = minimize_scalar(lambda t: -self.objective(t), bounds=(lo, hi), method="bounded",
                              options={"xatol": self.XTOL})
        tau2 = float(res.x)

        s_lo, s_hi = self.score(lo), self.score(hi)
        if s_lo > 0 > s_hi:
            tau2 = brentq(self.score, lo, hi, xtol=self.XTOL, rtol=self.RTOL)
        return max(0.0, float(tau2))


def reml_tau2(y, v) -> float:
    """
    REML estimate of the between-study variance.

    Args:
        y: Study estimates of one variate
        v: Their sampling variances

    Returns:
        tau^2 >= 0
    """
    return REMLEstimator(y, v).estimate()


def pool(y, v, tau2: float, level: float = 0.95) -> Tuple[float, float, Tuple[float, float]]:
    """Inverse-variance pooled estimate, its standard error and a normal CI."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if y.size < 1 or y.shape != v.shape:
        raise DomainError("pool needs at least one estimate with a matching variance")
    if not np.all(v > 0):
        raise DomainError("sampling variances must be positive")
    if tau2 < 0:
        raise DomainError(f"tau2 must be >= 0, got {tau2}")
    if not 0 < level < 1:
        raise DomainError(f"level must be in (0, 1), got {level}")

    w = 1.0 / (v + tau2)
    estimate = float(np.sum(w * y) / np.sum(w))
    se = float(np.sum(w) ** -0.5)
    z = norm.ppf(0.5 + level / 2)
    return estimate, se, (estimate - z * se, estimate + z * se)


def i_squared(y, v) -> float:
    """Higgins' I^2 from Cochran's Q; 0 when Q = 0."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if y.size < 2:
        raise DomainError(f"I^2 needs k >= 2 estimates, got k={y.size}")
    w = 1.0 / v
    y_fe = np.sum(w * y) / np.sum(w)
    Q = float(np.sum(w * (y - y_fe) ** 2))
    df = y.size - 1
    if Q <= 0:
        return 0.0
    return max(0.0, (Q - df) / Q)


def analyze_variate(variate_id: str, y: np.ndarray, v: np.ndarray, level: float = 0.95) -> UnivariateResult:
    k = int(y.size)
    if k == 1:
        tau2, i2, flag = 0.0, 0.0, FLAG_SINGLETON
    else:
        tau2, i2, flag = reml_tau2(y, v), i_squared(y, v), ""
    estimate, se, (low, high) = pool(y, v, tau2, level=level)
    if not high > low:
        flag = FLAG_ZERO_WIDTH
    return UnivariateResult(variate_id, k, estimate, se, low, high, tau2, i2, flag)


def analyze_univariate(dataset: MetaDataset, level: float = 0.95) -> pd.DataFrame:
    """
    Run a separate random-effects meta-analysis for every variate.

    Args:
        dataset: Studies to pool
        level: Confidence level of the reported intervals

    Returns:
        One row per variate with the documented result columns
    """
    results: List[UnivariateResult] = [
        analyze_variate(variate_id, y, v, level=level)
        for variate_id, (y, v) in dataset.by_variate().items()
    ]
    singletons = sum(r.flag == FLAG_SINGLETON for r in results)
    if singletons:
        logger.info("%d of %d variates are reported by a single study", singletons, len(results))
    unusable = [r.variate_id for r in results if not r.usable]
    if unusable:
        logger.warning("Zero-width intervals for variates %s", unusable)
    return pd.DataFrame([asdict(r) for r in results], columns=RESULT_COLUMNS)
