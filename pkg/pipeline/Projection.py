"""
Random projection between the p-dimensional variate space and the
q-dimensional space in which the covariance is modelled.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from pipeline.errors import ConsistencyError, DomainError

logger = logging.getLogger(__name__)

MAX_SEED = 2 ** 64 - 1
MIN_ROW_NORM = 1e-8
SYMMETRY_TOL = 1e-10

_HEADER = re.compile(r"#\s*projection\s+p=(\d+)\s+q=(\d+)\s+seed=(\d+)")


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    """
    A q x p map R with iid N(0, 1/q) entries.

    `seed` is the requested seed; `bumps` counts regenerations forced by a
    near-zero row, so the entries come from `seed + bumps`.
    """

    entries: np.ndarray
    seed: int
    q: int
    p: int
    bumps: int = 0

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.shape != (self.q, self.p):
            raise ConsistencyError(
                f"projection entries have shape {entries.shape}, expected ({self.q}, {self.p})")
        if not np.all(np.isfinite(entries)):
            raise DomainError("projection entries must be finite")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def effective_seed(self) -> int:
        return self.seed + self.bumps

    @property
    def T(self) -> np.ndarray:
        return self.entries.T


def _generate(p: int, q: int, seed: int) -> np.ndarray:
    # Philox is counter-based, so (seed, p, q) pins every entry
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal((q, p)) / np.sqrt(q)


def make_projection(p: int, q: int, seed: int) -> ProjectionMatrix:
    """
    Draw the random projection matrix R.

    Args:
        p: Number of variates
        q: Dimension of the covariance space, 1 <= q < p
        seed: Unsigned 64-bit seed

    Returns:
        A ProjectionMatrix, reproducible from (p, q, seed)
    """
    if not (1 <= q < p):
        raise DomainError(f"projection needs 1 <= q < p, got q={q}, p={p}")
    if not (0 <= seed <= MAX_SEED):
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")

    bumps = 0
    entries = _generate(p, q, seed)
    while np.min(np.linalg.norm(entries, axis=1)) < MIN_ROW_NORM:
        bumps += 1
        logger.warning("Projection row norm below %.0e; regenerating with seed %d",
                       MIN_ROW_NORM, seed + bumps)
        entries = _generate(p, q, seed + bumps)
    return ProjectionMatrix(entries=entries, seed=seed, q=q, p=p, bumps=bumps)


def _entries(R: Union[ProjectionMatrix, np.ndarray]) -> np.ndarray:
    return R.entries if isinstance(R, ProjectionMatrix) else np.asarray(R, dtype=float)


def lift_covariance(R: Union[ProjectionMatrix, np.ndarray], Sigma: np.ndarray) -> np.ndarray:
    """
    Map a q x q covariance back to the full space as R^T Sigma R.

    A raw array is accepted for R so callers can supply their own map.
    """
    Rm = _entries(R)
    Sigma = np.asarray(Sigma, dtype=float)
    q = Rm.shape[0]
    if Sigma.shape != (q, q):
        raise ConsistencyError(f"Sigma has shape {Sigma.shape}, expected ({q}, {q})")
    if not np.allclose(Sigma, Sigma.T, rtol=0.0, atol=SYMMETRY_TOL):
        raise DomainError("Sigma must be symmetric")
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as e:
        raise DomainError(f"Sigma must be positive definite: {e}") from e

    lifted = Rm.T @ Sigma @ Rm
    return 0.5 * (lifted + lifted.T)


def save_projection(R: ProjectionMatrix, path: Union[str, Path]) -> Path:
    """Write R as CSV under a one-line `# projection p= q= seed=` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"projection p={R.p} q={R.q} seed={R.effective_seed}"
    np.savetxt(path, R.entries, delimiter=",", header=header, comments="# ", fmt="%.17g")
    return path


def load_projection(path: Union[str, Path]) -> ProjectionMatrix:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    match = _HEADER.match(first.strip())
    if not match:
        raise ConsistencyError(f"{path}: missing '# projection p=<p> q=<q> seed=<seed>' header")
    p, q, seed = (int(g) for g in match.groups())
    entries = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    return ProjectionMatrix(entries=entries, seed=seed, q=q, p=p)
