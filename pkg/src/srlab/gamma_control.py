"""Schedules for the KL penalty weight ``gamma``.

``GammaState`` implements the plateau-style controller: gamma is multiplied by
``lam`` once the pseudo-label KL to the uniform prior has stayed at or below
``rho`` for ``T`` consecutive observations.  ``step_decay`` and
``cosine_anneal`` are the fixed schedules it is compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import NegativeKL, OutOfRange


@dataclass(frozen=True)
class GammaState:
    gamma: float = 1.0
    lam: float = 0.5
    rho: float = 0.005
    T: int = 10
    streak: int = 0
    iteration: int = 0
    # (iteration, new gamma) for every decay event
    history: tuple[tuple[int, float], ...] = field(default=())

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0 < self.lam < 1:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")
        if not self.rho > 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0 <= self.streak <= self.T:
            raise ValueError(f"streak {self.streak} outside [0, {self.T}]")

    @property
    def decays(self) -> int:
        return len(self.history)


def observe_kl(state: GammaState, kl: float) -> GammaState:
    """Advance the controller by one observation and return the new state."""
    if not kl >= 0:
        raise NegativeKL(f"KL must be >= 0, got {kl}")
    it = state.iteration + 1
    if kl > state.rho:
        return replace(state, streak=0, iteration=it)
    streak = state.streak + 1
    if streak < state.T:
        return replace(state, streak=streak, iteration=it)
    gamma = state.gamma * state.lam
    return replace(state, gamma=gamma, streak=0, iteration=it,
                   history=state.history + ((it, gamma),))


def replay(state: GammaState, kls) -> tuple[GammaState, list[float]]:
    """Feed a KL trace through the controller; returns the final state and gamma after each step."""
    gammas = []
    for kl in kls:
        state = observe_kl(state, kl)
        gammas.append(state.gamma)
    return state, gammas


def step_decay(gamma0: float, lam: float, epoch: int) -> float:
    return gamma0 * lam ** epoch


def cosine_anneal(gamma0: float, gamma_min: float, t: int, t_max: int) -> float:
    if not 0 <= t <= t_max:
        raise OutOfRange(f"t={t} outside [0, {t_max}]")
    if t == 0:
        return gamma0
    if t == t_max:
        return gamma_min
    return gamma_min + 0.5 * (gamma0 - gamma_min) * (1.0 + math.cos(math.pi * t / t_max))


def indicator(total_loss: float, gamma: float, kl: float) -> float:
    """Model-selection score: training loss plus the weighted marginal KL (lower is better)."""
    if kl < 0:
        raise NegativeKL(f"KL must be >= 0, got {kl}")
    return total_loss + gamma * kl
