"""
No-U-Turn Sampler with dual-averaging step-size adaptation, multi-chain
orchestration, split-R-hat diagnostics and posterior summaries.

Trajectories are sampled multinomially (biased progressive sampling at the
top level, uniform within subtrees) and stopped by the generalized U-turn
criterion, including the checks across merged subtrees. The mass matrix is
the identity.
"""

import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pipeline.LowDimModel import LowDimModel
from pipeline.MetaData import DEFAULT_Q_MAX, MetaDataset, param_count, select_q
from pipeline.Metrics import prob_best, rank_draws, sucra
from pipeline.Projection import ProjectionMatrix, lift_covariance, make_projection
from pipeline.errors import DomainError, InfeasibleError, NumericalError, SamplerAbort

logger = logging.getLogger(__name__)

LogpGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]

MAX_DELTA_H = 1000.0
MAX_INIT_ATTEMPTS = 100
MAX_NONFINITE_STREAK = 100

PROJECTION_STREAM = 1
CHAIN_STREAM = 2


@dataclass
class SamplerConfig:
    """
    Sampler settings. Defaults mirror four chains of 1000 warmup and 1000
    retained draws each.
    """

    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 20201
    rhat_threshold: float = 1.01
    workers: int = 1
    # fixes the step size and skips adaptation when set
    step_size: Optional[float] = None

    def validate(self):
        if self.chains < 2:
            raise DomainError(f"chains must be >= 2 for R-hat, got {self.chains}")
        if self.warmup < 1 or self.samples < 1:
            raise DomainError("warmup and samples must both be >= 1")
        if not (0.0 < self.target_accept < 1.0):
            raise DomainError(f"target_accept must lie in (0, 1), got {self.target_accept}")
        if self.max_tree_depth < 1:
            raise DomainError(f"max_tree_depth must be >= 1, got {self.max_tree_depth}")
        if self.seed < 0:
            raise DomainError(f"seed must be unsigned, got {self.seed}")
        if self.step_size is not None and not self.step_size > 0:
            raise DomainError(f"step_size must be positive, got {self.step_size}")
        return self


def derive_seeds(master: int, n: int, stream: int) -> List[int]:
    """Independent 64-bit seeds for one named stream of the master seed."""
    ss = np.random.SeedSequence([master, stream])
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64)]


class DualAveraging:
    """
    Dual averaging of log step size towards a target acceptance statistic.

    Args:
        prox_center: Point the iterates are shrunk towards, log(10 * eps0)
        t0: Stabilizes the first iterations
        kappa: Decay of the averaging weights, in (0.5, 1]
        gamma: Shrinkage strength
    """

    def __init__(self, prox_center: float = 0.0, t0: float = 10.0, kappa: float = 0.75, gamma: float = 0.05):
        self.prox_center = prox_center
        self.t0 = t0
        self.kappa = kappa
        self.gamma = gamma
        self.reset()

    def reset(self):
        self._x_avg = 0.0
        self._g_avg = 0.0
        self._x_t = self.prox_center
        self._t = 0

    def step(self, g: float):
        self._t += 1
        self._g_avg = (1 - 1 / (self._t + self.t0)) * self._g_avg + g / (self._t + self.t0)
        self._x_t = self.prox_center - (self._t ** 0.5) / self.gamma * self._g_avg
        weight_t = self._t ** (-self.kappa)
        self._x_avg = (1 - weight_t) * self._x_avg + weight_t * self._x_t

    def get_state(self) -> Tuple[float, float]:
        return self._x_t, self._x_avg


@dataclass
class PhasePoint:
    theta: np.ndarray
    rho: np.ndarray
    logp: float
    grad: np.ndarray

    @property
    def energy(self) -> float:
        return -self.logp + 0.5 * float(self.rho @ self.rho)


def _evaluate(fn: LogpGrad, theta: np.ndarray) -> Tuple[float, np.ndarray, bool]:
    """Evaluate log density and gradient; returns (logp, grad, finite)."""
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            logp, grad = fn(theta)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
        return -math.inf, np.zeros_like(theta), False
    grad = np.asarray(grad, dtype=float)
    if not (math.isfinite(logp) and np.all(np.isfinite(grad))):
        return -math.inf, np.zeros_like(theta), False
    return float(logp), grad, True


def leapfrog(point: PhasePoint, eps: float, fn: LogpGrad) -> Tuple[PhasePoint, bool]:
    """One leapfrog step of size eps; returns the new point and whether it is finite."""
    rho_half = point.rho + 0.5 * eps * point.grad
    theta = point.theta + eps * rho_half
    logp, grad, finite = _evaluate(fn, theta)
    rho = rho_half + 0.5 * eps * grad
    return PhasePoint(theta=theta, rho=rho, logp=logp, grad=grad), finite


def find_reasonable_step_size(point: PhasePoint, fn: LogpGrad, rng: np.random.Generator,
                              initial: float = 1.0) -> float:
    """Double or halve the step size until one leapfrog step crosses acceptance 1/2."""
    eps = initial
    rho = rng.standard_normal(point.theta.shape[0])
    start = PhasePoint(point.theta, rho, point.logp, point.grad)
    H0 = start.energy

    def log_accept(e):
        new, finite = leapfrog(start, e, fn)
        return H0 - new.energy if finite else -math.inf

    direction = 1 if log_accept(eps) > math.log(0.5) else -1
    for _ in range(100):
        la = log_accept(eps)
        if direction == 1 and not la > math.log(0.5):
            break
        if direction == -1 and not la < math.log(0.5):
            break
        eps = eps * 2.0 if direction == 1 else eps * 0.5
        if eps > 1e7 or eps < 1e-12:
            break
    return eps


def _no_uturn(p_minus: np.ndarray, p_plus: np.ndarray, rho_sum: np.ndarray) -> bool:
    return float(p_plus @ rho_sum) > 0 and float(p_minus @ rho_sum) > 0


@dataclass
class _Tree:
    valid: bool
    end: PhasePoint
    proposal: PhasePoint
    log_weight: float
    rho_sum: np.ndarray
    p_beg: np.ndarray
    p_end: np.ndarray


@dataclass
class Transition:
    point: PhasePoint
    accept_stat: float
    tree_depth: int
    n_leapfrog: int
    divergent: bool
    nonfinite: bool


class NUTSKernel:
    """One chain's transition kernel at a given step size."""

    def __init__(self, fn: LogpGrad, rng: np.random.Generator, max_tree_depth: int = 10):
        self.fn = fn
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.step_size = 1.0

    def _leaf(self, start: PhasePoint, direction: int, H0: float) -> _Tree:
        point, finite = leapfrog(start, direction * self.step_size, self.fn)
        self._n_leapfrog += 1
        H = point.energy if finite else math.inf
        if not finite:
            self._nonfinite = True
        if H - H0 > MAX_DELTA_H:
            self._divergent = True
        log_w = H0 - H
        self._sum_metro_prob += 1.0 if log_w > 0 else math.exp(log_w)
        return _Tree(valid=not self._divergent, end=point, proposal=point, log_weight=log_w,
                     rho_sum=point.rho.copy(), p_beg=point.rho, p_end=point.rho)

    def _build_tree(self, start: PhasePoint, depth: int, direction: int, H0: float) -> _Tree:
        if depth == 0:
            return self._leaf(start, direction, H0)

        init = self._build_tree(start, depth - 1, direction, H0)
        if not init.valid:
            return init
        final = self._build_tree(init.end, depth - 1, direction, H0)
        if not final.valid:
            return final

        log_w = np.logaddexp(init.log_weight, final.log_weight)
        if self.rng.uniform() < math.exp(final.log_weight - log_w):
            proposal = final.proposal
        else:
            proposal = init.proposal

        rho_sum = init.rho_sum + final.rho_sum
        persist = _no_uturn(init.p_beg, final.p_end, rho_sum)
        persist = persist and _no_uturn(init.p_beg, final.p_beg, init.rho_sum + final.p_beg)
        persist = persist and _no_uturn(init.p_end, final.p_end, final.rho_sum + init.p_end)
        return _Tree(valid=persist, end=final.end, proposal=proposal, log_weight=float(log_w),
                     rho_sum=rho_sum, p_beg=init.p_beg, p_end=final.p_end)

    def transition(self, current: PhasePoint) -> Transition:
        self._n_leapfrog = 0
        self._sum_metro_prob = 0.0
        self._divergent = False
        self._nonfinite = False

        rho0 = self.rng.standard_normal(current.theta.shape[0])
        z0 = PhasePoint(current.theta, rho0, current.logp, current.grad)
        H0 = z0.energy

        fwd = bck = sample = z0
        rho = rho0.copy()
        log_weight = 0.0
        depth = 0

        while depth < self.max_tree_depth:
            if self.rng.uniform() > 0.5:
                direction, start, old_adjacent, old_far = 1, fwd, fwd.rho, bck.rho
            else:
                direction, start, old_adjacent, old_far = -1, bck, bck.rho, fwd.rho

            tree = self._build_tree(start, depth, direction, H0)
            if not tree.valid:
                break
            if direction == 1:
                fwd = tree.end
            else:
                bck = tree.end
            depth += 1

            if tree.log_weight > log_weight:
                sample = tree.proposal
            elif self.rng.uniform() < math.exp(tree.log_weight - log_weight):
                sample = tree.proposal
            log_weight = float(np.logaddexp(log_weight, tree.log_weight))

            rho_old = rho
            rho = rho_old + tree.rho_sum
            persist = _no_uturn(old_far, tree.p_end, rho)
            persist = persist and _no_uturn(old_far, tree.p_beg, rho_old + tree.p_beg)
            persist = persist and _no_uturn(old_adjacent, tree.p_end, tree.rho_sum + old_adjacent)
            if not persist:
                break

        accept = self._sum_metro_prob / max(self._n_leapfrog, 1)
        return Transition(point=sample, accept_stat=accept, tree_depth=depth,
                          n_leapfrog=self._n_leapfrog, divergent=self._divergent,
                          nonfinite=self._nonfinite)


@dataclass
class ChainResult:
    chain: int
    seed: int
    draws: np.ndarray
    step_size: float
    accept_stats: np.ndarray
    tree_depths: np.ndarray
    n_leapfrog: np.ndarray
    divergences: int
    warmup_divergences: int
    max_depth_hits: int

    def diagnostics(self) -> dict:
        return {
            "chain": self.chain,
            "seed": self.seed,
            "step_size": self.step_size,
            "mean_accept_stat": float(np.mean(self.accept_stats)),
            "divergences": self.divergences,
            "warmup_divergences": self.warmup_divergences,
            "max_depth_hits": self.max_depth_hits,
            "tree_depth_histogram": {
                str(k): int(v) for k, v in sorted(Counter(self.tree_depths.tolist()).items())
            },
            "n_leapfrog": int(np.sum(self.n_leapfrog)),
        }


@dataclass
class SamplerRun:
    chains: List[ChainResult]
    config: SamplerConfig

    @property
    def draws(self) -> np.ndarray:
        """Post-warmup draws with shape (chains, samples, dim)."""
        return np.stack([c.draws for c in self.chains])

    def diagnostics(self) -> List[dict]:
        return [c.diagnostics() for c in self.chains]


def _initial_point(fn: LogpGrad, dim: int, rng: np.random.Generator, chain: int) -> PhasePoint:
    for _ in range(MAX_INIT_ATTEMPTS):
        theta = rng.uniform(-2.0, 2.0, size=dim)
        logp, grad, finite = _evaluate(fn, theta)
        if finite:
            return PhasePoint(theta, np.zeros(dim), logp, grad)
    raise SamplerAbort(
        f"chain {chain}: no finite initial point in {MAX_INIT_ATTEMPTS} attempts",
        state=theta, chain=chain)


def _run_chain(chain: int, seed: int, fn: LogpGrad, dim: int, config: SamplerConfig,
               init: Optional[np.ndarray]) -> ChainResult:
    rng = np.random.Generator(np.random.Philox(seed))
    if init is None:
        point = _initial_point(fn, dim, rng, chain)
    else:
        theta = np.asarray(init, dtype=float).copy()
        logp, grad, finite = _evaluate(fn, theta)
        if not finite:
            raise SamplerAbort(f"chain {chain}: log density not finite at the initial point",
                               state=theta, chain=chain)
        point = PhasePoint(theta, np.zeros(dim), logp, grad)

    kernel = NUTSKernel(fn, rng, max_tree_depth=config.max_tree_depth)
    adapt = config.step_size is None
    if adapt:
        kernel.step_size = find_reasonable_step_size(point, fn, rng)
        averager = DualAveraging(prox_center=math.log(10.0 * kernel.step_size))
    else:
        kernel.step_size = config.step_size

    draws = np.empty((config.samples, dim))
    accept_stats = np.empty(config.samples)
    tree_depths = np.empty(config.samples, dtype=int)
    n_leapfrog = np.empty(config.samples, dtype=int)
    divergences = warmup_divergences = max_depth_hits = 0
    streak = 0

    for it in range(config.warmup + config.samples):
        tr = kernel.transition(point)
        point = tr.point

        streak = streak + 1 if (tr.nonfinite and tr.tree_depth == 0) else 0
        if streak >= MAX_NONFINITE_STREAK:
            raise SamplerAbort(
                f"chain {chain}: {streak} consecutive transitions hit a non-finite "
                f"log density or gradient", state=point.theta, chain=chain)

        if it < config.warmup:
            warmup_divergences += int(tr.divergent)
            if adapt:
                averager.step(config.target_accept - min(tr.accept_stat, 1.0))
                x_t, x_avg = averager.get_state()
                kernel.step_size = math.exp(x_avg if it == config.warmup - 1 else x_t)
            continue

        k = it - config.warmup
        draws[k] = point.theta
        accept_stats[k] = tr.accept_stat
        tree_depths[k] = tr.tree_depth
        n_leapfrog[k] = tr.n_leapfrog
        divergences += int(tr.divergent)
        max_depth_hits += int(tr.tree_depth >= config.max_tree_depth)

    if divergences:
        logger.warning("Chain %d: %d divergent transitions after warmup", chain, divergences)
    if max_depth_hits:
        logger.warning("Chain %d: %d transitions hit the maximum tree depth", chain, max_depth_hits)

    return ChainResult(chain=chain, seed=seed, draws=draws, step_size=kernel.step_size,
                       accept_stats=accept_stats, tree_depths=tree_depths, n_leapfrog=n_leapfrog,
                       divergences=divergences, warmup_divergences=warmup_divergences,
                       max_depth_hits=max_depth_hits)


def nuts_sample(logpost: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                dim: int, config: SamplerConfig, init: Optional[Sequence[np.ndarray]] = None,
                logpost_and_grad: Optional[LogpGrad] = None) -> SamplerRun:
    """
    Run independent NUTS chains and return their post-warmup draws.

    Args:
        logpost: Log density of the target
        grad: Gradient of the log density
        dim: Dimension of the target
        config: Sampler settings
        init: Optional starting point per chain; uniform(-2, 2) otherwise
        logpost_and_grad: Optional combined evaluation, used instead of the pair

    Returns:
        A SamplerRun holding one ChainResult per chain
    """
    config.validate()
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    fn = logpost_and_grad or (lambda th: (logpost(th), grad(th)))
    seeds = derive_seeds(config.seed, config.chains, CHAIN_STREAM)
    inits = list(init) if init is not None else [None] * config.chains

    def run(c):
        return _run_chain(c, seeds[c], fn, dim, config, inits[c])

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            chains = list(pool.map(run, range(config.chains)))
    else:
        chains = [run(c) for c in range(config.chains)]
    return SamplerRun(chains=chains, config=config)


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """
    Split-R-hat per parameter.

    Args:
        draws: Array of shape (chains, n) or (chains, n, params)

    Returns:
        R-hat per parameter; +inf where the within-chain variance is zero
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 2:
        draws = draws[:, :, None]
    chains, n = draws.shape[:2]
    if chains < 2 or n < 4:
        raise DomainError(f"split_rhat needs >= 2 chains of >= 4 draws, got {chains} x {n}")

    half = n // 2
    pieces = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)

    piece_means = pieces.mean(axis=1)
    B = half * piece_means.var(axis=0, ddof=1)
    W = pieces.var(axis=1, ddof=1).mean(axis=0)
    var_plus = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / W)
    rhat = np.where(W > 0, rhat, np.inf)
    return rhat


def summarize(draws: np.ndarray, level: float,
              transform: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> pd.DataFrame:
    """
    Posterior mean, sd and equal-tailed interval per parameter.

    Quantiles use linear interpolation between order statistics and are taken
    after applying `transform` to every draw.
    """
    if not (0.0 < level < 1.0):
        raise DomainError(f"level must lie in (0, 1), got {level}")
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    elif x.ndim == 3:
        x = x.reshape(-1, x.shape[-1])
    if transform is not None:
        x = transform(x)
    alpha = 1.0 - level
    lower, upper = np.quantile(x, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return pd.DataFrame({
        "mean": x.mean(axis=0),
        "sd": x.std(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(x.shape[1]),
        "lower": lower,
        "upper": upper,
    })


@dataclass
class PosteriorSummary:
    """
    Per-variate posterior summaries on the Fisher-z and correlation scales,
    plus the draws needed for rankings and covariance reporting.
    """

    variates: Tuple[str, ...]
    level: float
    table: pd.DataFrame
    rank_draws: np.ndarray
    sigma_draws: np.ndarray
    converged: bool
    rhat: np.ndarray


@dataclass
class FitResult:
    q: int
    projection: ProjectionMatrix
    summary: PosteriorSummary
    run: SamplerRun
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.summary.converged

    def covariance(self) -> np.ndarray:
        """Posterior mean of R^T Sigma R, computed element-wise."""
        mean_sigma = self.summary.sigma_draws.mean(axis=0)
        return lift_covariance(self.projection, 0.5 * (mean_sigma + mean_sigma.T))


def _sigma_draws(model: LowDimModel, flat: np.ndarray) -> np.ndarray:
    return np.stack([model.unpack(theta).Sigma for theta in flat])


def fit(dataset: MetaDataset, q: Optional[int] = None, config: Optional[SamplerConfig] = None,
        level: float = 0.98, q_max: int = DEFAULT_Q_MAX,
        projection_seed: Optional[int] = None) -> FitResult:
    """
    Fit the low-dimensional model to a dataset.

    Args:
        dataset: Studies to synthesize
        q: Covariance dimension; defaults to select_q(n, p, q_max)
        config: Sampler settings
        level: Credible level of the reported equal-tailed intervals
        q_max: Upper bound for the automatic choice of q
        projection_seed: Seed for R; derived from the master seed when omitted

    Returns:
        A FitResult; non-convergence is flagged, never raised
    """
    config = (config or SamplerConfig()).validate()
    n, p = dataset.n, dataset.p
    if q is None:
        q = select_q(n, p, q_max)
    elif param_count("lowdim", p, q) > n:
        raise InfeasibleError(
            f"q={q} needs {param_count('lowdim', p, q)} parameters but only n={n} "
            f"estimates are available for p={p} variates (largest feasible q: "
            f"{_largest_q_or_none(n, p, q_max)})")

    if projection_seed is None:
        projection_seed = derive_seeds(config.seed, 1, PROJECTION_STREAM)[0]
    R = make_projection(p, q, projection_seed)
    model = LowDimModel(dataset, R)

    logger.info("Fitting p=%d, q=%d, n=%d, m=%d with %d chains", p, q, n, dataset.m, config.chains)
    run = nuts_sample(model.log_posterior, model.grad, model.dim, config,
                      logpost_and_grad=model.log_posterior_and_grad)

    draws = run.draws
    rhat = split_rhat(draws)
    rhat_mu = rhat[:p]
    converged = bool(np.all(rhat_mu < config.rhat_threshold))
    if not converged:
        logger.warning("Fit did not converge: max R-hat on mu = %.4f (threshold %.3f)",
                       float(np.max(rhat_mu)), config.rhat_threshold)

    mu_draws = draws[:, :, :p].reshape(-1, p)
    z_table = summarize(mu_draws, level)
    r_table = summarize(mu_draws, level, transform=np.tanh)
    ranks = rank_draws(mu_draws)

    table = pd.DataFrame({
        "variate_id": list(dataset.variates),
        "mean": z_table["mean"],
        "sd": z_table["sd"],
        "lower": z_table["lower"],
        "upper": z_table["upper"],
        "r_mean": r_table["mean"],
        "r_lower": r_table["lower"],
        "r_upper": r_table["upper"],
        "rhat": rhat_mu,
        "sucra": sucra(ranks),
        "p_best": prob_best(ranks),
    })

    summary = PosteriorSummary(
        variates=dataset.variates, level=level, table=table, rank_draws=ranks,
        sigma_draws=_sigma_draws(model, draws.reshape(-1, model.dim)),
        converged=converged, rhat=rhat)

    diagnostics = {
        "q": q,
        "p": p,
        "m": dataset.m,
        "n_estimates": n,
        "level": level,
        "master_seed": config.seed,
        "projection_seed": projection_seed,
        "projection_bumps": R.bumps,
        "chain_seeds": [c.seed for c in run.chains],
        "sampler": asdict(config),
        "chains": run.diagnostics(),
        "rhat_mu": dict(zip(dataset.variates, rhat_mu.tolist())),
        "rhat_sigma": rhat[p:].tolist(),
        "rhat_threshold": config.rhat_threshold,
        "converged": converged,
    }
    return FitResult(q=q, projection=R, summary=summary, run=run, diagnostics=diagnostics)


def _largest_q_or_none(n: int, p: int, q_max: int) -> Optional[int]:
    try:
        return select_q(n, p, q_max)
    except InfeasibleError:
        return None

