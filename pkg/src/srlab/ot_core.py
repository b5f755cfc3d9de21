"""Entropic optimal-transport solvers for pseudo-label generation.

All solvers take a row-stochastic probability matrix ``p`` (M x N) and use the
cost ``C = -log p``.  Returned plans follow the convention that every row sums
to one, so the entries of a plan sum to M; the ``1/M`` normalisation of the
objective is applied when the objective is evaluated, not stored in the plan.

The semi-relaxed problem keeps the row marginal exact and replaces the column
constraint with a KL penalty of weight ``gamma``::

    F(Q) = (1/M) <Q, -log p> + gamma * KL((1/M) Q^T 1, nu) - epsilon * H(Q / M)

It is solved by the scaling iteration

    a = mu / (K b),   b = (nu / (K^T a)) ** (gamma / (gamma + epsilon))

with ``K = p ** (1 / epsilon)``.  ``gamma -> inf`` recovers balanced Sinkhorn;
``gamma = 0`` gives the row-normalised ``p ** (1 / epsilon)`` in closed form.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

from .errors import (
    InvalidProbability,
    InvalidSupport,
    NonFiniteInput,
    NumericUnderflow,
    ShapeMismatch,
    StepTooLarge,
)

PROB_FLOOR = 1e-30
LOG_DOMAIN_BELOW = 0.02
BILEVEL_INNER_ITERS = 50


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 0.05
    gamma: float = 1.0
    tol: float = 1e-4
    max_iter: int = 1000
    # None selects log-domain iterations automatically when epsilon < 0.02.
    log_domain: bool | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")

    def use_log_domain(self) -> bool:
        if self.log_domain is None:
            return self.epsilon < LOG_DOMAIN_BELOW
        return self.log_domain


@dataclass
class MarginalPair:
    mu: np.ndarray
    nu: np.ndarray

    @classmethod
    def uniform(cls, m: int, n: int) -> "MarginalPair":
        return cls(np.full(m, 1.0 / m), np.full(n, 1.0 / n))

    def validate(self, m: int, n: int) -> None:
        if self.mu.shape != (m,) or self.nu.shape != (n,):
            raise ShapeMismatch(
                f"marginals of shape {self.mu.shape}/{self.nu.shape} do not fit a {m}x{n} matrix"
            )
        for name, v in (("mu", self.mu), ("nu", self.nu)):
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise InvalidSupport(f"{name} must be finite and strictly positive")
            if abs(v.sum() - 1.0) > 1e-9:
                raise InvalidSupport(f"{name} must sum to 1, sums to {v.sum():.12g}")


@dataclass
class TransportPlan:
    values: np.ndarray
    converged: bool
    iterations: int
    final_residual: float
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column_marginal(self) -> np.ndarray:
        """Normalised cluster-size distribution ``(1/M) Q^T 1``."""
        return self.values.sum(axis=0) / self.values.shape[0]

    def sidecar(self) -> dict[str, Any]:
        return {
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "final_residual": float(self.final_residual),
        }


def as_probability_matrix(p, *, atol: float = 1e-6) -> np.ndarray:
    """Validate ``p`` as a row-stochastic matrix and clamp it away from zero."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] == 0:
        raise ShapeMismatch(f"expected a non-empty 2-D matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("probability matrix contains NaN or Inf")
    if np.any(p < 0):
        raise InvalidProbability("probability matrix has negative entries")
    err = np.max(np.abs(p.sum(axis=1) - 1.0))
    if err > atol:
        raise InvalidProbability(f"rows must sum to 1 (max deviation {err:.3g})")
    return np.maximum(p, PROB_FLOOR)


def kl_div(p, q) -> float:
    """KL(p || q) for simplex vectors, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"KL arguments differ in shape: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InvalidSupport("q is zero where p is positive")
    ps, qs = p[support], q[support]
    return float(max(np.sum(ps * (np.log(ps) - np.log(qs))), 0.0))


def _plan_values(q) -> np.ndarray:
    return np.asarray(q.values if isinstance(q, TransportPlan) else q, dtype=np.float64)


def srot_objective(q, p, gamma: float, epsilon: float, nu=None) -> float:
    """Entropic semi-relaxed objective of plan ``q`` (rows summing to one)."""
    q = _plan_values(q)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise ShapeMismatch(f"plan {q.shape} and probabilities {p.shape} differ")
    m, n = q.shape
    nu = np.full(n, 1.0 / n) if nu is None else np.asarray(nu, dtype=np.float64)
    if nu.shape != (n,):
        raise ShapeMismatch(f"nu has shape {nu.shape}, expected ({n},)")
    pi = q / m
    cost = float(np.sum(pi * -np.log(np.maximum(p, PROB_FLOOR))))
    value = cost
    if gamma:
        value += gamma * kl_div(pi.sum(axis=0), nu)
    if epsilon:
        nz = pi[pi > 0]
        value += epsilon * float(np.sum(nz * np.log(nz)))
    return value


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    # scipy's logsumexp carries enough per-call overhead to dominate small solves
    top = x.max(axis=axis, keepdims=True)
    return np.log(np.exp(x - top).sum(axis=axis)) + top.squeeze(axis)


def _gauge_free_change(delta: np.ndarray) -> float:
    # The plan is unchanged when log b shifts by a constant (a absorbs it), and
    # for f close to 1 that shift decays only at rate f; measure the rest.
    return float(delta.max() - delta.min())


def _scale(log_k, mu, nu, f, cfg: SolverConfig):
    """Shared scaling loop. Returns (a or log a, b or log b, iters, residual, converged, log_domain)."""
    log_domain = cfg.use_log_domain()
    m, n = log_k.shape
    residual = np.inf
    converged = False
    it = 0
    if log_domain:
        log_mu, log_nu = np.log(mu), np.log(nu)
        log_b = np.zeros(n)
        for it in range(1, cfg.max_iter + 1):
            log_a = log_mu - _lse(log_k + log_b[None, :], axis=1)
            new = f * (log_nu - _lse(log_k + log_a[:, None], axis=0))
            residual = _gauge_free_change(new - log_b)
            log_b = new
            if residual < cfg.tol:
                converged = True
                break
        log_a = log_mu - _lse(log_k + log_b[None, :], axis=1)
        return log_a, log_b, it, residual, converged, True

    k = np.exp(log_k)
    b = np.ones(n)
    log_b = np.zeros(n)
    log_nu = np.log(nu)
    for it in range(1, cfg.max_iter + 1):
        # a zero in K b or K^T a surfaces as a non-finite log of the new scaling
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            a = mu / (k @ b)
            log_new = f * (log_nu - np.log(k.T @ a))
        if not np.isfinite(log_new).all():
            raise NumericUnderflow(f"K b or K^T a underflowed at iteration {it}; use a larger epsilon or log domain")
        residual = _gauge_free_change(log_new - log_b)
        log_b = log_new
        b = np.exp(log_new)
        if residual < cfg.tol:
            converged = True
            break
    kb = k @ b
    if np.any(kb <= 0):
        raise NumericUnderflow("K b underflowed in the final row update")
    a = mu / kb
    return a, b, it, residual, converged, False


def _log_kernel(p: np.ndarray, epsilon: float) -> np.ndarray:
    log_k = np.log(p) / epsilon
    # Row shifts are absorbed by the row scaling a; this keeps K b away from 0.
    return log_k - log_k.max(axis=1, keepdims=True)


def _assemble(log_k, a, b, log_domain: bool) -> np.ndarray:
    m = log_k.shape[0]
    if log_domain:
        q = np.exp(log_k + a[:, None] + b[None, :])
    else:
        q = a[:, None] * np.exp(log_k) * b[None, :]
    q *= m
    # Final a-update makes rows exact up to rounding; renormalising removes that rounding.
    q /= q.sum(axis=1, keepdims=True)
    return q


def _solve(p, cfg: SolverConfig, mu, nu, f) -> tuple[TransportPlan, np.ndarray]:
    log_k = _log_kernel(p, cfg.epsilon)
    a, b, it, residual, converged, log_domain = _scale(log_k, mu, nu, f, cfg)
    q = _assemble(log_k, a, b, log_domain)
    log_b = b if log_domain else np.log(b)
    plan = TransportPlan(q, converged, it, residual, {"log_domain": log_domain})
    return plan, log_b


def sinkhorn_balanced(p, cfg: SolverConfig = SolverConfig(), nu=None) -> TransportPlan:
    """Balanced entropic OT: rows sum to one and columns match ``M * nu``.

    ``cfg.gamma`` is ignored.  ``nu`` defaults to the uniform distribution.
    """
    p = as_probability_matrix(p)
    m, n = p.shape
    marg = MarginalPair.uniform(m, n)
    if nu is not None:
        marg = MarginalPair(marg.mu, np.asarray(nu, dtype=np.float64))
    marg.validate(m, n)
    plan, _ = _solve(p, cfg, marg.mu, marg.nu, 1.0)
    return plan


def semi_relaxed_ot(p, cfg: SolverConfig = SolverConfig(), marginals: MarginalPair | None = None) -> TransportPlan:
    """Semi-relaxed entropic OT with a KL penalty on the column marginal."""
    p = as_probability_matrix(p)
    m, n = p.shape
    marginals = marginals or MarginalPair.uniform(m, n)
    marginals.validate(m, n)
    f = cfg.gamma / (cfg.gamma + cfg.epsilon)
    plan, _ = _solve(p, cfg, marginals.mu, marginals.nu, f)
    return plan


def bilevel_baseline(
    p,
    cfg: SolverConfig = SolverConfig(),
    w_step: float = 0.01,
    outer_iters: int = 100,
    nu=None,
    target_objective: float | None = None,
    objective_tol: float = 1e-3,
) -> TransportPlan:
    """Alternating baseline: balanced Sinkhorn on a column marginal ``w``, then a
    projected gradient step on ``w``.

    The gradient of the entropic transport value with respect to ``w`` is the
    column dual potential ``epsilon * log b``; the penalty adds
    ``gamma * (log(w / nu) + 1)``.  If ``target_objective`` is given the loop stops
    as soon as the plan's objective is within ``objective_tol`` (relative) of it.
    """
    start = time.perf_counter()
    p = as_probability_matrix(p)
    m, n = p.shape
    nu = np.full(n, 1.0 / n) if nu is None else np.asarray(nu, dtype=np.float64)
    MarginalPair(np.full(m, 1.0 / m), nu).validate(m, n)
    inner = SolverConfig(epsilon=cfg.epsilon, gamma=cfg.gamma, tol=cfg.tol,
                         max_iter=BILEVEL_INNER_ITERS, log_domain=cfg.log_domain)
    mu = np.full(m, 1.0 / m)
    w = nu.copy()

    def reached(plan):
        if target_objective is None:
            return False
        obj = srot_objective(plan, p, cfg.gamma, cfg.epsilon, nu)
        return abs(obj - target_objective) <= objective_tol * max(abs(target_objective), 1.0)

    plan, log_b = _solve(p, inner, mu, w, 1.0)
    outer = 0
    while outer < outer_iters and not reached(plan):
        grad = cfg.epsilon * log_b + cfg.gamma * (np.log(w / nu) + 1.0)
        step = w - w_step * (grad - grad.mean())
        if not np.all(np.isfinite(step)):
            raise NonFiniteInput("non-finite cluster-size estimate")
        violation = -step[step < 0].sum()
        if violation > 10.0 * w.sum():
            raise StepTooLarge(f"w update left the simplex by {violation:.3g}; reduce w_step")
        w = np.maximum(step, 1e-12)
        w /= w.sum()
        plan, log_b = _solve(p, inner, mu, w, 1.0)
        outer += 1
    plan.meta.update(
        outer_iterations=outer,
        elapsed=time.perf_counter() - start,
        w=w,
    )
    return plan


def oracle_solve(p, gamma: float, epsilon: float, nu=None, iters: int = 100_000,
                 tol: float = 0.0) -> TransportPlan:
    """Reference solver by entropic mirror descent on each row simplex.

    Works directly on the primal objective with step ``1 / (gamma + epsilon)``
    (the relative-smoothness constant).  Intended for small problems in tests.
    ``tol > 0`` stops early once the largest log-entry change drops below it.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("probability matrix contains NaN or Inf")
    p = np.maximum(p, PROB_FLOOR)
    m, n = p.shape
    nu = np.full(n, 1.0 / n) if nu is None else np.asarray(nu, dtype=np.float64)
    cost = -np.log(p)
    eta = 1.0 / (gamma + epsilon)
    # log of pi = Q / M, each row summing to 1/M
    log_pi = np.full((m, n), -np.log(m) - np.log(n))
    change = np.inf
    it = 0
    for it in range(1, iters + 1):
        w = np.exp(logsumexp(log_pi, axis=0))
        grad = cost + gamma * (np.log(w / nu) + 1.0) + epsilon * (log_pi + 1.0)
        new = log_pi - eta * grad
        new -= logsumexp(new, axis=1, keepdims=True) + np.log(m)
        change = float(np.max(np.abs(new - log_pi)))
        log_pi = new
        if change < tol:
            break
    q = np.exp(log_pi) * m
    q /= q.sum(axis=1, keepdims=True)
    return TransportPlan(q, bool(change < tol), it, change, {"oracle": True})


def imbalanced_scores(m: int, n: int, seed: int = 0, decay: float = 0.05, margin: float = 3.0) -> np.ndarray:
    """Row-stochastic prediction matrix for benchmarks.

    Each row has a hidden label drawn from a geometric class prior (largest to
    smallest class ratio ``1 / decay``); its logit gets ``margin`` added on top of
    standard normal noise.
    """
    rng = np.random.default_rng(seed)
    prior = np.geomspace(1.0, decay, n)
    labels = rng.choice(n, size=m, p=prior / prior.sum())
    logits = rng.normal(size=(m, n))
    logits[np.arange(m), labels] += margin
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)
