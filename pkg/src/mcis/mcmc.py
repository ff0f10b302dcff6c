"""Random-walk Metropolis kernels over particle-filter likelihoods.

Three samplers share one skeleton:

* ``run_pmmh`` — pseudo-marginal chain whose acceptance ratio uses the
  particle normalizer directly.
* ``run_delayed_acceptance`` — screens proposals with a cheap
  approximate likelihood, then corrects accepted ones with the exact
  particle normalizer.
* ``run_approx_marginal_chain`` — targets the approximate (regularized)
  posterior only, emitting a jump chain for later importance-sampling
  correction.

Acceptance ratios are computed entirely in log domain and the tests
draw log-uniforms.  Proposal covariance adapts during a declared
burn-in and then freezes, so post-burn-in chains are plain Markov.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, Callable

import numpy as np

from .errors import InitializationError, ParameterError, SupportConditionError
from .smc import run_particle_filter

__all__ = [
    "Prior",
    "UniformPrior",
    "GaussianPrior",
    "ProposalState",
    "propose",
    "adapt_covariance",
    "ChainTrace",
    "JumpChain",
    "LikelihoodEvaluation",
    "particle_likelihood_runner",
    "run_pmmh",
    "run_delayed_acceptance",
    "run_approx_marginal_chain",
]

ADAPT_JITTER = 1e-10
MAX_INIT_RETRIES = 100


# ---------------------------------------------------------------------------
# Priors


class Prior:
    """Parameter prior: a log density and a sampler.

    The log density must be evaluable at any point; ``-inf`` marks zero
    prior mass.
    """

    def log_density(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class UniformPrior(Prior):
    """Independent uniform components on [lower, upper]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, float))
        upper = np.atleast_1d(np.asarray(self.upper, float))
        if lower.shape != upper.shape or np.any(upper <= lower):
            raise ParameterError("uniform prior needs lower < upper componentwise")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, float)
        if np.any(theta < self.lower) or np.any(theta > self.upper):
            return -math.inf
        return -float(np.sum(np.log(self.upper - self.lower)))

    def sample(self, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class GaussianPrior(Prior):
    """Independent Gaussian components."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, float))
        sd = np.atleast_1d(np.asarray(self.sd, float))
        sd = np.broadcast_to(sd, mean.shape).copy()
        if np.any(sd <= 0):
            raise ParameterError("prior standard deviations must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sd", sd)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, theta) -> float:
        z = (np.asarray(theta, float) - self.mean) / self.sd
        return float(
            -0.5 * np.sum(z * z)
            - np.sum(np.log(self.sd))
            - 0.5 * self.mean.size * math.log(2.0 * math.pi)
        )

    def sample(self, rng) -> np.ndarray:
        return self.mean + self.sd * rng.standard_normal(self.mean.size)


# ---------------------------------------------------------------------------
# Random-walk proposal with adaptive covariance


@dataclass(frozen=True, eq=False)
class ProposalState:
    """Gaussian random-walk proposal and its adaptation accumulators.

    ``covariance`` is the actual proposal covariance — symmetric
    positive definite by construction (a jitter floor is always mixed
    in).  ``raw_cov`` and ``mean`` are the recursive estimates the
    adaptation maintains; ``covariance = scale * raw_cov + jitter * I``.
    """

    covariance: np.ndarray
    scale: float = 0.0  # 0 → filled with 2.38^2 / dim
    step: int = 0
    frozen: bool = False
    mean: np.ndarray | None = None
    raw_cov: np.ndarray | None = None

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, float))
        dim = cov.shape[0]
        if cov.shape != (dim, dim) or not np.allclose(cov, cov.T):
            raise ParameterError("proposal covariance must be square symmetric")
        object.__setattr__(self, "covariance", cov)
        scale = self.scale if self.scale > 0 else 2.38**2 / dim
        object.__setattr__(self, "scale", float(scale))
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(dim))
        else:
            object.__setattr__(self, "mean", np.asarray(self.mean, float))
        if self.raw_cov is None:
            object.__setattr__(self, "raw_cov", cov / scale)
        else:
            object.__setattr__(self, "raw_cov", np.asarray(self.raw_cov, float))

    @classmethod
    def isotropic(cls, dim: int, sd: float = 1.0) -> "ProposalState":
        """Proposal with covariance ``sd^2 I``, default adaptation scale."""
        return cls(covariance=sd * sd * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def freeze(self) -> "ProposalState":
        return replace(self, frozen=True)

    def log_transition_density(self, x_from, x_to) -> float:
        """Log density of proposing ``x_to`` from ``x_from``."""
        diff = np.asarray(x_to, float) - np.asarray(x_from, float)
        chol = np.linalg.cholesky(self.covariance)
        z = np.linalg.solve(chol, diff)
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return float(
            -0.5 * (z @ z) - 0.5 * log_det - 0.5 * self.dim * math.log(2.0 * math.pi)
        )


def propose(
    current: np.ndarray, prop: ProposalState, rng: np.random.Generator
) -> np.ndarray:
    """Symmetric Gaussian random-walk step from ``current``."""
    current = np.atleast_1d(np.asarray(current, float))
    chol = np.linalg.cholesky(prop.covariance)
    return current + chol @ rng.standard_normal(prop.dim)


def adapt_covariance(
    prop: ProposalState, new_sample: np.ndarray, k: int
) -> ProposalState:
    """One stochastic-approximation update of the proposal covariance.

    Uses step size ``k**(-2/3)`` for the running mean/covariance, scales
    the covariance estimate by ``scale`` (default the classic
    ``2.38^2 / dim``), and mixes in a small identity jitter so the
    result stays positive definite.  A frozen state is returned as-is.
    """
    if prop.frozen:
        return prop
    if k < 1:
        raise ParameterError("adaptation step must be >= 1")
    gamma = float(k) ** (-2.0 / 3.0)
    x = np.atleast_1d(np.asarray(new_sample, float))
    delta = x - prop.mean
    new_mean = prop.mean + gamma * delta
    new_raw = prop.raw_cov + gamma * (np.outer(delta, delta) - prop.raw_cov)
    new_cov = prop.scale * new_raw + ADAPT_JITTER * np.eye(prop.dim)
    return replace(
        prop, covariance=new_cov, mean=new_mean, raw_cov=new_raw, step=k
    )


# ---------------------------------------------------------------------------
# Trace containers


@dataclass(frozen=True, eq=False)
class ChainTrace:
    """Per-iteration record of a Metropolis chain.

    ``thetas[k]`` is the state after iteration ``k``; ``accepted[k]``
    says whether that iteration's proposal was taken.  ``functionals``
    carries the per-iteration value of the declared test function under
    the current state's particle weights (NaN when none was declared).
    ``payloads`` holds algorithm-specific extras (e.g. the realized
    stage probabilities of delayed acceptance).
    """

    thetas: np.ndarray
    logliks: np.ndarray
    accepted: np.ndarray
    functionals: np.ndarray
    payloads: list | None = None
    n_burn: int = 0

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self) else 0.0

    def post_burn_in(self) -> np.ndarray:
        return self.thetas[self.n_burn:]

    def to_records(self):
        """One JSON-safe dict per iteration."""
        for k in range(len(self)):
            yield {
                "k": k + 1,
                "theta": self.thetas[k].tolist(),
                "loglik_hat": float(self.logliks[k]),
                "accepted": bool(self.accepted[k]),
            }


@dataclass(frozen=True, eq=False)
class JumpChain:
    """Distinct accepted states with holding times.

    Consecutive states are distinct and holding times are positive;
    expanding by holding times reproduces the underlying chain's state
    sequence exactly.  ``logliks`` caches the realized approximate
    log-likelihood of each state; ``payloads`` whatever the likelihood
    evaluator attached (kept so later phases can reuse the level-0
    particle output instead of recomputing it).
    """

    thetas: np.ndarray
    logliks: np.ndarray
    holding_times: np.ndarray
    payloads: list | None = None

    def __post_init__(self):
        holding = np.asarray(self.holding_times, np.int64)
        if holding.size and holding.min() < 1:
            raise ParameterError("holding times must be positive")
        object.__setattr__(self, "holding_times", holding)

    def __len__(self) -> int:
        return self.thetas.shape[0]

    @property
    def total_length(self) -> int:
        return int(self.holding_times.sum())

    def expand_thetas(self) -> np.ndarray:
        """Reconstruct the full state sequence, one row per iteration."""
        return np.repeat(self.thetas, self.holding_times, axis=0)

    def to_records(self):
        for j in range(len(self)):
            yield {
                "j": j + 1,
                "theta": self.thetas[j].tolist(),
                "loglik0_hat": float(self.logliks[j]),
                "holding_time": int(self.holding_times[j]),
            }


class _JumpBuilder:
    def __init__(self):
        self.thetas: list = []
        self.logliks: list = []
        self.holding: list = []
        self.payloads: list = []

    def push(self, theta, loglik, payload, *, new_state: bool):
        if new_state or not self.thetas:
            self.thetas.append(np.array(theta, float))
            self.logliks.append(float(loglik))
            self.holding.append(1)
            self.payloads.append(payload)
        else:
            self.holding[-1] += 1

    def build(self) -> JumpChain:
        return JumpChain(
            thetas=np.array(self.thetas),
            logliks=np.array(self.logliks),
            holding_times=np.array(self.holding, np.int64),
            payloads=self.payloads,
        )


# ---------------------------------------------------------------------------
# Likelihood evaluation plumbing


@dataclass(frozen=True, eq=False)
class LikelihoodEvaluation:
    """Result of one likelihood evaluation at a parameter point.

    ``functional`` is the self-normalized value of the declared test
    function under this evaluation's particle weights (NaN if no test
    function or no particles are involved); ``payload`` is retained
    verbatim (smoother output, costs, ...).
    """

    log_likelihood: float
    functional: float = math.nan
    payload: Any = None


def _as_evaluation(result) -> LikelihoodEvaluation:
    if isinstance(result, LikelihoodEvaluation):
        return result
    if isinstance(result, tuple):
        log_lik, payload = result
        return LikelihoodEvaluation(float(log_lik), payload=payload)
    return LikelihoodEvaluation(float(result))


def particle_likelihood_runner(
    model_family: Callable[[np.ndarray], Any],
    n_particles: int,
    scheme: str = "systematic",
    test_function: Callable | None = None,
):
    """Build a likelihood evaluator backed by the particle filter.

    ``model_family(theta)`` must return the Feynman-Kac model at
    ``theta``.  The returned callable maps ``(theta, rng)`` to a
    `LikelihoodEvaluation` whose payload is the smoother estimate and
    whose functional is the self-normalized value of ``test_function``
    (a callable of ``(theta, paths)`` returning per-particle values).
    """

    def runner(theta, rng) -> LikelihoodEvaluation:
        model = model_family(theta)
        funcs = []
        if test_function is not None:
            funcs = [lambda paths: test_function(theta, paths)]
        _, estimate = run_particle_filter(
            model, n_particles, scheme=scheme, rng=rng, test_functions=funcs
        )
        functional = float(estimate.self_normalized[0]) if funcs else math.nan
        return LikelihoodEvaluation(
            log_likelihood=estimate.log_normalizer,
            functional=functional,
            payload=estimate,
        )

    return runner


def _log_regularized(log_likelihood: float, eps_reg: float) -> float:
    """log(L + eps) from log L, staying in log domain."""
    if eps_reg < 0:
        raise ParameterError("regularization must be nonnegative")
    if eps_reg == 0.0:
        return log_likelihood
    if log_likelihood == -math.inf:
        return math.log(eps_reg)
    return float(np.logaddexp(log_likelihood, math.log(eps_reg)))


def _accepts(rng: np.random.Generator, log_ratio: float) -> bool:
    if log_ratio >= 0.0:
        return True
    if log_ratio == -math.inf:
        return False
    return math.log(rng.random()) < log_ratio


def _initialize(prior, draw_state, rng, what: str):
    """Draw from the prior until ``draw_state`` accepts, capped."""
    for _ in range(MAX_INIT_RETRIES):
        theta = np.atleast_1d(prior.sample(rng))
        state = draw_state(theta)
        if state is not None:
            return state
    raise InitializationError(
        f"no valid starting point for {what} in {MAX_INIT_RETRIES} prior draws"
    )


# ---------------------------------------------------------------------------
# PMMH


def run_pmmh(
    prior: Prior,
    proposal: ProposalState,
    pf_runner: Callable,
    n_iterations: int,
    rng: np.random.Generator,
    n_burn: int = 0,
) -> tuple[ChainTrace, float]:
    """Pseudo-marginal Metropolis-Hastings over a likelihood estimator.

    ``pf_runner(theta, rng)`` returns the (unbiasedly estimated) log
    likelihood plus the current test-function value; any nonnegative
    unbiased estimator keeps the exact posterior invariant.  The chain
    estimator averages the per-iteration functional over post-burn-in
    iterations (NaN when the runner declares no test function).
    Proposal covariance adapts for ``n_burn`` iterations, then freezes.
    """
    if n_iterations < 1:
        raise ParameterError("need at least one iteration")

    def draw_state(theta):
        if prior.log_density(theta) == -math.inf:
            return None
        ev = _as_evaluation(pf_runner(theta, rng))
        if ev.log_likelihood == -math.inf:
            return None
        return theta, ev

    theta, ev = _initialize(prior, draw_state, rng, "PMMH")
    log_prior = prior.log_density(theta)

    dim = theta.size
    thetas = np.empty((n_iterations, dim))
    logliks = np.empty(n_iterations)
    accepted = np.zeros(n_iterations, bool)
    functionals = np.empty(n_iterations)

    for k in range(1, n_iterations + 1):
        theta_new = propose(theta, proposal, rng)
        log_prior_new = prior.log_density(theta_new)
        if log_prior_new > -math.inf:
            ev_new = _as_evaluation(pf_runner(theta_new, rng))
            log_ratio = (log_prior_new + ev_new.log_likelihood) - (
                log_prior + ev.log_likelihood
            )
            if _accepts(rng, log_ratio):
                theta, ev, log_prior = theta_new, ev_new, log_prior_new
                accepted[k - 1] = True
        thetas[k - 1] = theta
        logliks[k - 1] = ev.log_likelihood
        functionals[k - 1] = ev.functional
        if k <= n_burn:
            proposal = adapt_covariance(proposal, theta, k)
            if k == n_burn:
                proposal = proposal.freeze()

    trace = ChainTrace(
        thetas=thetas,
        logliks=logliks,
        accepted=accepted,
        functionals=functionals,
        n_burn=n_burn,
    )
    estimate = float(np.mean(functionals[n_burn:]))
    return trace, estimate


# ---------------------------------------------------------------------------
# Delayed acceptance


def run_delayed_acceptance(
    prior: Prior,
    proposal: ProposalState,
    approx_lik: Callable,
    pf_runner: Callable,
    eps_reg: float,
    n_iterations: int,
    rng: np.random.Generator,
    n_burn: int = 0,
    diagnostic_stage2: bool = False,
) -> tuple[ChainTrace, float]:
    """Two-stage Metropolis: cheap screen, exact correction.

    Stage 1 accepts with the ratio of ``prior * (approx_lik + eps_reg)``
    values; only then is the exact particle likelihood computed, and
    stage 2 accepts with the ratio of exact-to-regularized-approximate
    likelihood ratios.  With ``eps_reg = 0`` the caller asserts the
    support condition: the approximate likelihood must be positive
    wherever the exact one is.

    With ``diagnostic_stage2=True`` the exact filter also runs on
    stage-1 rejections so that every iteration's payload records all
    three realized log acceptance probabilities (stage 1, stage 2, and
    the single-stage probability from the same estimates).  The chain's
    law is unchanged; it only spends more likelihood evaluations.
    """
    if n_iterations < 1:
        raise ParameterError("need at least one iteration")
    if eps_reg < 0:
        raise ParameterError("regularization must be nonnegative")

    def draw_state(theta):
        if prior.log_density(theta) == -math.inf:
            return None
        ll0, _ = _normalize_approx(approx_lik(theta, rng))
        if _log_regularized(ll0, eps_reg) == -math.inf:
            return None
        ev = _as_evaluation(pf_runner(theta, rng))
        if ev.log_likelihood == -math.inf:
            return None
        return theta, ll0, ev

    theta, ll0, ev = _initialize(prior, draw_state, rng, "delayed acceptance")
    log_prior = prior.log_density(theta)
    log_reg = _log_regularized(ll0, eps_reg)

    dim = theta.size
    thetas = np.empty((n_iterations, dim))
    logliks = np.empty(n_iterations)
    accepted = np.zeros(n_iterations, bool)
    functionals = np.empty(n_iterations)
    payloads: list = []

    for k in range(1, n_iterations + 1):
        theta_new = propose(theta, proposal, rng)
        log_prior_new = prior.log_density(theta_new)
        if log_prior_new == -math.inf:
            # zero-mass proposal: stage 1 rejects outright; the exact
            # likelihood plays no role, so the single-stage probability
            # is zero as well
            payloads.append(
                {"log_stage1": -math.inf, "log_stage2": 0.0, "log_pmmh": -math.inf}
            )
        else:
            ll0_new, _ = _normalize_approx(approx_lik(theta_new, rng))
            log_reg_new = _log_regularized(ll0_new, eps_reg)
            delta1 = (log_prior_new + log_reg_new) - (log_prior + log_reg)
            stage1_ok = _accepts(rng, delta1)
            record = {
                "log_stage1": min(0.0, delta1),
                "log_stage2": None,
                "log_pmmh": None,
            }
            if stage1_ok or diagnostic_stage2:
                ev_new = _as_evaluation(pf_runner(theta_new, rng))
                if ev_new.log_likelihood > -math.inf and log_reg_new == -math.inf:
                    raise SupportConditionError(
                        "approximate likelihood vanished where the exact one "
                        "is positive; use eps_reg > 0"
                    )
                delta2 = (ev_new.log_likelihood - log_reg_new) - (
                    ev.log_likelihood - log_reg
                )
                record["log_stage2"] = min(0.0, delta2)
                record["log_pmmh"] = min(0.0, delta1 + delta2)
                if stage1_ok and _accepts(rng, delta2):
                    theta, ll0, ev = theta_new, ll0_new, ev_new
                    log_prior, log_reg = log_prior_new, log_reg_new
                    accepted[k - 1] = True
            payloads.append(record)
        thetas[k - 1] = theta
        logliks[k - 1] = ev.log_likelihood
        functionals[k - 1] = ev.functional
        if k <= n_burn:
            proposal = adapt_covariance(proposal, theta, k)
            if k == n_burn:
                proposal = proposal.freeze()

    trace = ChainTrace(
        thetas=thetas,
        logliks=logliks,
        accepted=accepted,
        functionals=functionals,
        payloads=payloads,
        n_burn=n_burn,
    )
    estimate = float(np.mean(functionals[n_burn:]))
    return trace, estimate


def _normalize_approx(result) -> tuple[float, Any]:
    if isinstance(result, tuple):
        log_lik, payload = result
        return float(log_lik), payload
    if isinstance(result, LikelihoodEvaluation):
        return result.log_likelihood, result.payload
    return float(result), None


# ---------------------------------------------------------------------------
# Approximate marginal chain (phase 1 of the IS-corrected sampler)


def run_approx_marginal_chain(
    prior: Prior,
    proposal: ProposalState,
    approx_lik: Callable,
    eps_reg: float,
    n_iterations: int,
    rng: np.random.Generator,
    n_burn: int = 0,
) -> JumpChain:
    """Metropolis chain targeting ``prior * (approx_lik + eps_reg)``.

    Returns the post-burn-in portion in jump-chain form: one entry per
    distinct accepted state with its holding time, realized approximate
    log-likelihood, and the evaluator's payload.  The holding times sum
    to ``n_iterations - n_burn``.
    """
    if n_iterations < 1:
        raise ParameterError("need at least one iteration")
    if n_burn >= n_iterations:
        raise ParameterError("burn-in must leave at least one iteration")
    if eps_reg < 0:
        raise ParameterError("regularization must be nonnegative")

    def draw_state(theta):
        if prior.log_density(theta) == -math.inf:
            return None
        ll0, payload = _normalize_approx(approx_lik(theta, rng))
        if _log_regularized(ll0, eps_reg) == -math.inf:
            return None
        return theta, ll0, payload

    theta, ll0, payload = _initialize(prior, draw_state, rng, "approximate chain")
    log_prior = prior.log_density(theta)
    log_reg = _log_regularized(ll0, eps_reg)

    builder = _JumpBuilder()
    for k in range(1, n_iterations + 1):
        theta_new = propose(theta, proposal, rng)
        log_prior_new = prior.log_density(theta_new)
        took = False
        if log_prior_new > -math.inf:
            ll0_new, payload_new = _normalize_approx(approx_lik(theta_new, rng))
            log_reg_new = _log_regularized(ll0_new, eps_reg)
            delta = (log_prior_new + log_reg_new) - (log_prior + log_reg)
            if _accepts(rng, delta):
                theta, ll0, payload = theta_new, ll0_new, payload_new
                log_prior, log_reg = log_prior_new, log_reg_new
                took = True
        if k > n_burn:
            # the first kept iteration always opens a fresh block
            builder.push(theta, ll0, payload, new_state=took or k == n_burn + 1)
        if k <= n_burn:
            proposal = adapt_covariance(proposal, theta, k)
            if k == n_burn:
                proposal = proposal.freeze()

    return builder.build()
