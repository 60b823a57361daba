"""
Synthetic meta-analyses of correlations with a known truth.

Each replicate draws a random correlation matrix over p variates plus one
outcome, samples units for every study, turns the sample correlations with
the outcome into Fisher-z estimates, adds between-study heterogeneity and
removes cells completely at random.
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import List, Optional, Tuple, Union

import numpy as np

from pipeline.MetaData import Estimate, MetaDataset, Study, fisher_z, fisher_z_se
from pipeline.Univariate import i_squared
from pipeline.errors import CalibrationRangeError, DomainError, InfeasibleError

logger = logging.getLogger(__name__)

# calibrate_het_sd(0.5, SimConfig()): median univariate I^2 within 0.01 of 0.5
DEFAULT_HET_SD = 0.0375
CALIBRATED = "calibrated"

OUTCOME = 0
MASK_BATCH = 256
MAX_MASK_DRAWS = 1_000_000
UNIT_CHUNK = 100_000


@dataclass(frozen=True)
class SimConfig:
    n_meta: int = 1000
    studies_range: Tuple[int, int] = (4, 15)
    units_range: Tuple[int, int] = (50, 4000)
    p_range: Tuple[int, int] = (5, 25)
    density: float = 0.24
    het_sd: Union[float, str] = DEFAULT_HET_SD
    target_i2: float = 0.5
    seed: int = 20201

    def validate(self) -> "SimConfig":
        if self.n_meta < 1:
            raise DomainError(f"n_meta must be >= 1, got {self.n_meta}")
        for name, (lo, hi) in (("studies_range", self.studies_range),
                               ("units_range", self.units_range),
                               ("p_range", self.p_range)):
            if lo > hi:
                raise DomainError(f"{name} is empty: [{lo}, {hi}]")
        if self.studies_range[0] < 1:
            raise DomainError("every replicate needs at least one study")
        if self.units_range[0] < 4:
            raise DomainError("studies need at least 4 units for a Fisher-z standard error")
        if self.p_range[0] < 1:
            raise DomainError("every replicate needs at least one variate")
        if not 0 < self.density <= 1:
            raise DomainError(f"density must be in (0, 1], got {self.density}")
        if isinstance(self.het_sd, str):
            if self.het_sd != CALIBRATED:
                raise DomainError(f"het_sd must be a number or '{CALIBRATED}', got '{self.het_sd}'")
        elif self.het_sd < 0:
            raise DomainError(f"het_sd must be >= 0, got {self.het_sd}")
        if not 0 < self.target_i2 < 1:
            raise DomainError(f"target_i2 must be in (0, 1), got {self.target_i2}")
        if self.seed < 0:
            raise DomainError(f"seed must be unsigned, got {self.seed}")
        return self


@dataclass(frozen=True, eq=False)
class SimTruth:
    """Everything needed to score an analysis of one replicate."""

    index: int
    seed: int
    mu_true: np.ndarray
    correlation_matrix: np.ndarray
    n_units: np.ndarray
    unit_offsets: np.ndarray
    mask: np.ndarray
    het_sd: float

    @property
    def p(self) -> int:
        return self.mu_true.shape[0]

    @property
    def m(self) -> int:
        return self.n_units.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        """Heterogeneity added to each (study, variate) cell."""
        return self.het_sd * self.unit_offsets

    @property
    def realized_density(self) -> float:
        return float(self.mask.mean())

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "p": self.p,
            "m": self.m,
            "n_estimates": int(self.mask.sum()),
            "realized_density": self.realized_density,
            "het_sd": self.het_sd,
            "mu_true": self.mu_true.tolist(),
            "n_units": self.n_units.tolist(),
            "correlation_matrix": self.correlation_matrix.tolist(),
        }


@dataclass(frozen=True, eq=False)
class _Draw:
    """Replicate randomness that does not depend on het_sd."""

    index: int
    correlation_matrix: np.ndarray
    n_units: np.ndarray
    z: np.ndarray
    unit_offsets: np.ndarray
    mask: np.ndarray


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def variate_ids(p: int) -> List[str]:
    width = max(2, len(str(p)))
    return [f"v{k:0{width}d}" for k in range(1, p + 1)]


def study_ids(m: int) -> List[str]:
    width = max(2, len(str(m)))
    return [f"s{i:0{width}d}" for i in range(1, m + 1)]


def random_correlation_matrix(dim: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random correlation matrix from the normalized Gram matrix of a
    dim x (dim + 2) standard-normal matrix.
    """
    if dim < 2:
        raise DomainError(f"a correlation matrix needs dim >= 2, got {dim}")
    G = rng.standard_normal((dim, dim + 2))
    S = G @ G.T
    scale = 1.0 / np.sqrt(np.diag(S))
    C = S * np.outer(scale, scale)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def _sample_correlations(rng: np.random.Generator, chol: np.ndarray, n: int) -> np.ndarray:
    """Sample correlations of every variate with the outcome from n MVN units."""
    dim = chol.shape[0]
    total = np.zeros(dim)
    cross = np.zeros((dim, dim))
    done = 0
    while done < n:
        size = min(UNIT_CHUNK, n - done)
        units = rng.standard_normal((size, dim)) @ chol.T
        total += units.sum(axis=0)
        cross += units.T @ units
        done += size
    mean = total / n
    cov = cross / n - np.outer(mean, mean)
    sd = np.sqrt(np.diag(cov))
    r = cov[OUTCOME] / (sd[OUTCOME] * sd)
    return np.delete(r, OUTCOME)


def _draw_mask(rng: np.random.Generator, m: int, p: int, density: float) -> np.ndarray:
    # resample until no study and no variate is empty
    drawn = 0
    while drawn < MAX_MASK_DRAWS:
        masks = rng.random((MASK_BATCH, m, p)) < density
        valid = masks.any(axis=2).all(axis=1) & masks.any(axis=1).all(axis=1)
        hits = np.flatnonzero(valid)
        if hits.size:
            return masks[hits[0]]
        drawn += MASK_BATCH
    raise InfeasibleError(
        f"no missingness mask with non-empty studies and variates after {MAX_MASK_DRAWS} draws "
        f"(m={m}, p={p}, density={density})")


def _draw(config: SimConfig, index: int) -> _Draw:
    rng = replicate_rng(config.seed, index)
    p = int(rng.integers(config.p_range[0], config.p_range[1] + 1))
    m = int(rng.integers(config.studies_range[0], config.studies_range[1] + 1))
    corr = random_correlation_matrix(p + 1, rng)
    chol = np.linalg.cholesky(corr)

    n_units = rng.integers(config.units_range[0], config.units_range[1] + 1, size=m)
    z = np.empty((m, p))
    for i, n in enumerate(n_units):
        r = _sample_correlations(rng, chol, int(n))
        z[i] = fisher_z(np.clip(r, -1 + 1e-15, 1 - 1e-15))

    unit_offsets = rng.standard_normal((m, p))
    mask = _draw_mask(rng, m, p, config.density)
    return _Draw(index, corr, n_units, z, unit_offsets, mask)


def _assemble(config: SimConfig, draw: _Draw, het_sd: float) -> Tuple[MetaDataset, SimTruth]:
    m, p = draw.z.shape
    y = draw.z + het_sd * draw.unit_offsets
    variates = variate_ids(p)
    studies = []
    for i, study_id in enumerate(study_ids(m)):
        se = fisher_z_se(int(draw.n_units[i]))
        estimates = tuple(
            Estimate(variates[k], float(y[i, k]), se)
            for k in range(p) if draw.mask[i, k]
        )
        studies.append(Study(study_id, estimates))

    truth = SimTruth(
        index=draw.index,
        seed=config.seed,
        mu_true=fisher_z(draw.correlation_matrix[OUTCOME, 1:]),
        correlation_matrix=draw.correlation_matrix,
        n_units=draw.n_units,
        unit_offsets=draw.unit_offsets,
        mask=draw.mask,
        het_sd=het_sd,
    )
    return MetaDataset(tuple(studies)), truth


def simulate_meta(config: SimConfig, index: int) -> Tuple[MetaDataset, SimTruth]:
    """
    Generate replicate `index`; identical for identical (config.seed, index).

    Args:
        config: Simulation settings
        index: Replicate number, 0-based

    Returns:
        The simulated dataset and its truth
    """
    config.validate()
    het_sd = resolve_het_sd(config)
    return _assemble(config, _draw(config, index), het_sd)


def resolve_het_sd(config: SimConfig) -> float:
    if config.het_sd == CALIBRATED:
        return _calibrated(replace(config, n_meta=1))
    return float(config.het_sd)


@lru_cache(maxsize=8)
def _calibrated(config: SimConfig) -> float:
    return calibrate_het_sd(config.target_i2, replace(config, het_sd=0.0))


class _CalibrationSet:
    """Fixed calibration replicates whose median I^2 is evaluated at different het_sd."""

    def __init__(self, config: SimConfig, n_replicates: int):
        self.config = config
        self.draws = [_draw(config, index) for index in range(n_replicates)]

    def median_i2(self, het_sd: float) -> float:
        values = []
        for draw in self.draws:
            y = draw.z + het_sd * draw.unit_offsets
            v = 1.0 / (draw.n_units - 3.0)
            for k in range(y.shape[1]):
                rows = draw.mask[:, k]
                if rows.sum() >= 2:
                    values.append(i_squared(y[rows, k], v[rows]))
        if not values:
            raise CalibrationRangeError("calibration replicates have no variate with k >= 2")
        return float(np.median(values))


def calibrate_het_sd(target_i2: float, calibration_config: Optional[SimConfig] = None,
                     n_replicates: int = 50, tol: float = 0.05, max_iter: int = 60) -> float:
    """
    Bisection on het_sd so the median univariate I^2 over a fixed replicate set hits target_i2.

    Args:
        target_i2: Target median I^2, strictly inside (0, 1)
        calibration_config: Settings of the calibration replicates (defaults to SimConfig())
        n_replicates: Number of calibration replicates
        tol: Accepted distance between the median I^2 and the target
        max_iter: Bisection steps

    Returns:
        The calibrated heterogeneity standard deviation

    Raises:
        CalibrationRangeError: if the target cannot be reached
    """
    if not 0 < target_i2 < 1:
        raise DomainError(f"target_i2 must be in (0, 1), got {target_i2}")
    config = replace(calibration_config or SimConfig(), het_sd=0.0).validate()
    calibration_set = _CalibrationSet(config, n_replicates)

    lo, hi = 0.0, 0.05
    at_zero = calibration_set.median_i2(lo)
    if at_zero > target_i2 + tol:
        raise CalibrationRangeError(
            f"median I^2 is already {at_zero:.3f} without heterogeneity; target {target_i2} unattainable")
    while calibration_set.median_i2(hi) < target_i2:
        hi *= 2.0
        if hi > 10.0:
            raise CalibrationRangeError(f"median I^2 never reaches {target_i2} for het_sd <= 10")

    mid = hi
    for step in range(max_iter):
        mid = 0.5 * (lo + hi)
        value = calibration_set.median_i2(mid)
        logger.info("Calibration step %d: het_sd=%.5f median I^2=%.3f", step, mid, value)
        if abs(value - target_i2) <= tol / 5:
            break
        if value < target_i2:
            lo = mid
        else:
            hi = mid
    return mid

