"""
Log-posterior of the low-dimensional random-effects model

    y_i ~ N(X_i mu, Phi_i),   Phi_i = D_i + X_i R^T Sigma R X_i^T

and its analytic gradient in unconstrained coordinates.

The unconstrained vector is [mu (p), vech(L) (q(q+1)/2)] where L is the
lower-triangular Cholesky factor of Sigma, stored row by row with its
diagonal on the log scale.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import multigammaln

from pipeline.MetaData import MetaDataset, Study, indicator_matrix
from pipeline.Projection import ProjectionMatrix
from pipeline.errors import ConsistencyError, NumericalError

# mu_k ~ N(0, 10^3), read as a variance
PRIOR_MU_VARIANCE = 1e3

LOG_2PI = math.log(2.0 * math.pi)


def n_unconstrained(p: int, q: int) -> int:
    return p + q * (q + 1) // 2


@dataclass(frozen=True, eq=False)
class ModelState:
    """
    Model parameters: the p means and the Cholesky factor L of Sigma.

    L has a strictly positive diagonal, so Sigma = L L^T is positive definite.
    """

    mu: np.ndarray
    L: np.ndarray

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def q(self) -> int:
        return self.L.shape[0]

    @property
    def Sigma(self) -> np.ndarray:
        return self.L @ self.L.T

    @classmethod
    def from_unconstrained(cls, theta: np.ndarray, p: int, q: int) -> "ModelState":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (n_unconstrained(p, q),):
            raise ConsistencyError(
                f"unconstrained vector has length {theta.size}, expected {n_unconstrained(p, q)}")
        rows, cols = np.tril_indices(q)
        L = np.zeros((q, q))
        L[rows, cols] = theta[p:]
        diag = np.arange(q)
        L[diag, diag] = np.exp(L[diag, diag])
        return cls(mu=theta[:p].copy(), L=L)

    @classmethod
    def from_sigma(cls, mu: np.ndarray, Sigma: np.ndarray) -> "ModelState":
        return cls(mu=np.asarray(mu, dtype=float), L=np.linalg.cholesky(Sigma))

    def to_unconstrained(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.q)
        L = self.L.copy()
        diag = np.arange(self.q)
        L[diag, diag] = np.log(L[diag, diag])
        return np.concatenate([self.mu, L[rows, cols]])


@dataclass(frozen=True, eq=False)
class FittedStudyBlock:
    """
    One study's contribution: indicator X_i, sampling variances d_i, estimates y_i.
    """

    study_id: str
    X: np.ndarray
    d: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = self.y.shape[0]
        if self.X.shape[0] != t or self.d.shape != (t,):
            raise ConsistencyError(f"study '{self.study_id}': block dimensions disagree")
        if not np.all(self.d > 0):
            raise ConsistencyError(f"study '{self.study_id}': sampling variances must be positive")

    @property
    def columns(self) -> np.ndarray:
        """Variate column selected by each row of X."""
        return np.argmax(self.X, axis=1)

    @classmethod
    def from_study(cls, study: Study, variates) -> "FittedStudyBlock":
        return cls(
            study_id=study.study_id,
            X=indicator_matrix(study, variates),
            d=study.variances,
            y=study.y,
        )


def _R(R: Union[ProjectionMatrix, np.ndarray]) -> np.ndarray:
    return R.entries if isinstance(R, ProjectionMatrix) else np.asarray(R, dtype=float)


def phi(block: FittedStudyBlock, R: Union[ProjectionMatrix, np.ndarray], Sigma: np.ndarray) -> np.ndarray:
    """Marginal covariance of one study's estimates: diag(d_i) + (X_i R^T) Sigma (X_i R^T)^T."""
    Rm = _R(R)
    Sigma = np.asarray(Sigma, dtype=float)
    if block.X.shape[1] != Rm.shape[1] or Sigma.shape != (Rm.shape[0], Rm.shape[0]):
        raise ConsistencyError(
            f"study '{block.study_id}': X is {block.X.shape}, R is {Rm.shape}, Sigma is {Sigma.shape}")
    A = block.X @ Rm.T
    return np.diag(block.d) + A @ Sigma @ A.T


def log_prior_density(state: ModelState) -> float:
    """Normal prior on mu plus inverse-Wishart(I, q + 1) on Sigma."""
    q = state.q
    nu = q + 1
    lp_mu = -0.5 * np.sum(state.mu ** 2) / PRIOR_MU_VARIANCE \
        - 0.5 * state.p * math.log(2.0 * math.pi * PRIOR_MU_VARIANCE)

    logdet_Sigma = 2.0 * np.sum(np.log(np.diag(state.L)))
    L_inv = np.linalg.solve(state.L, np.eye(q))
    trace_Sigma_inv = np.sum(L_inv ** 2)
    lp_sigma = (-0.5 * nu * q * math.log(2.0) - multigammaln(0.5 * nu, q)
                - 0.5 * (nu + q + 1) * logdet_Sigma - 0.5 * trace_Sigma_inv)
    return float(lp_mu + lp_sigma)


def log_jacobian(state: ModelState) -> float:
    """log |d Sigma / d theta| for Sigma = L L^T with log-diagonal L."""
    q = state.q
    # 2^q prod L_jj^(q-j+1) for the Cholesky map, times prod L_jj for the log map
    powers = q - np.arange(q) + 1
    return float(q * math.log(2.0) + np.sum(powers * np.log(np.diag(state.L))))


class LowDimModel:
    """
    Log-posterior of the low-dimensional model for a fixed dataset and projection.

    Priors: mu_k ~ N(0, 10^3) independently and Sigma ~ InvWishart(I_q, q + 1).
    """

    def __init__(self, dataset: MetaDataset, R: ProjectionMatrix):
        if R.p != dataset.p:
            raise ConsistencyError(f"projection has p={R.p}, dataset has p={dataset.p}")
        self.dataset = dataset
        self.R = R
        self.p = dataset.p
        self.q = R.q
        self.dim = n_unconstrained(self.p, self.q)
        self.blocks: List[FittedStudyBlock] = [
            FittedStudyBlock.from_study(s, dataset.variates) for s in dataset.studies
        ]
        # X_i R^T is a column selection of R^T
        self._A = [R.entries[:, b.columns].T for b in self.blocks]
        self._cols = [b.columns for b in self.blocks]
        self._tril = np.tril_indices(self.q)
        self._diag_pos = np.array(
            [k for k, (r, c) in enumerate(zip(*self._tril)) if r == c])

    def unpack(self, theta: np.ndarray) -> ModelState:
        return ModelState.from_unconstrained(theta, self.p, self.q)

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-2.0, 2.0, size=self.dim)

    def _likelihood(self, state: ModelState, want_grad: bool) -> Tuple[float, Optional[np.ndarray], Optional[np.ndarray]]:
        Sigma = state.Sigma
        if not np.all(np.isfinite(Sigma)):
            raise NumericalError("Sigma overflowed: log-diagonal of L too large")
        total = 0.0
        g_mu = np.zeros(self.p) if want_grad else None
        g_Sigma = np.zeros((self.q, self.q)) if want_grad else None

        for block, A, cols in zip(self.blocks, self._A, self._cols):
            Phi = np.diag(block.d) + A @ Sigma @ A.T
            try:
                C = np.linalg.cholesky(Phi)
            except np.linalg.LinAlgError as e:
                raise NumericalError(
                    f"Cholesky of Phi failed for study '{block.study_id}'") from e
            if not np.all(np.isfinite(C)):
                raise NumericalError(f"Cholesky of Phi is not finite for study '{block.study_id}'")
            resid = block.y - state.mu[cols]
            alpha = cho_solve((C, True), resid)
            logdet = 2.0 * np.sum(np.log(np.diag(C)))
            t = resid.shape[0]
            total += -0.5 * t * LOG_2PI - 0.5 * logdet - 0.5 * resid @ alpha

            if want_grad:
                np.add.at(g_mu, cols, alpha)
                Phi_inv = cho_solve((C, True), np.eye(t))
                G = 0.5 * (np.outer(alpha, alpha) - Phi_inv)
                g_Sigma += A.T @ G @ A

        return total, g_mu, g_Sigma

    def log_likelihood(self, state: ModelState) -> float:
        return self._likelihood(state, want_grad=False)[0]

    def log_prior_density(self, state: ModelState) -> float:
        return log_prior_density(state)

    def log_jacobian(self, state: ModelState) -> float:
        return log_jacobian(state)

    def log_prior(self, state: ModelState) -> float:
        return log_prior_density(state) + log_jacobian(state)

    def log_posterior(self, theta: np.ndarray) -> float:
        state = self.unpack(theta)
        return self.log_likelihood(state) + self.log_prior(state)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.log_posterior_and_grad(theta)[1]

    def log_posterior_and_grad(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """
        Log-posterior and its gradient with respect to the unconstrained vector.

        dlogN/dmu = X^T Phi^-1 (y - X mu); dlogN/dSigma = A^T G A with
        G = (alpha alpha^T - Phi^-1) / 2, chained through Sigma = L L^T.
        """
        state = self.unpack(theta)
        q = self.q
        ll, g_mu, g_Sigma = self._likelihood(state, want_grad=True)

        g_mu = g_mu - state.mu / PRIOR_MU_VARIANCE

        nu = q + 1
        L_inv = np.linalg.solve(state.L, np.eye(q))
        Sigma_inv = L_inv.T @ L_inv
        g_Sigma = g_Sigma - 0.5 * (nu + q + 1) * Sigma_inv + 0.5 * Sigma_inv @ Sigma_inv

        # d/dL tr(G dSigma) = 2 G L for symmetric G
        g_L = 2.0 * g_Sigma @ state.L
        g_chol = g_L[self._tril]
        diag_L = np.diag(state.L)
        g_chol[self._diag_pos] *= diag_L
        g_chol[self._diag_pos] += q - np.arange(q) + 1

        value = ll + self.log_prior_density(state) + self.log_jacobian(state)
        return value, np.concatenate([g_mu, g_chol])


def _model(dataset: MetaDataset, R: ProjectionMatrix) -> LowDimModel:
    return LowDimModel(dataset, R)


def log_likelihood(dataset: MetaDataset, state: ModelState, R: ProjectionMatrix) -> float:
    _check_state(dataset, state, R)
    return _model(dataset, R).log_likelihood(state)


def log_prior(state: ModelState) -> float:
    """Prior density of the state plus the change-of-variables Jacobian."""
    return log_prior_density(state) + log_jacobian(state)


def log_posterior(dataset: MetaDataset, state: ModelState, R: ProjectionMatrix) -> float:
    _check_state(dataset, state, R)
    model = _model(dataset, R)
    return model.log_likelihood(state) + model.log_prior(state)


def grad_log_posterior(dataset: MetaDataset, state: ModelState, R: ProjectionMatrix) -> np.ndarray:
    _check_state(dataset, state, R)
    return _model(dataset, R).grad(state.to_unconstrained())


def _check_state(dataset: MetaDataset, state: ModelState, R: ProjectionMatrix):
    if state.p != dataset.p or state.q != R.q:
        raise ConsistencyError(
            f"state has p={state.p}, q={state.q}; dataset p={dataset.p}, projection q={R.q}")
