import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from srlab.errors import NegativeKL, OutOfRange
from srlab.gamma_control import GammaState, cosine_anneal, indicator, observe_kl, replay, step_decay


def feed(state, kls):
    for kl in kls:
        state = observe_kl(state, kl)
    return state


def test_ten_small_observations_halve_gamma():
    s = feed(GammaState(gamma=1.0, lam=0.5, rho=0.005, T=10), [0.001] * 10)
    assert s.gamma == 0.5
    assert s.streak == 0
    assert s.history == ((10, 0.5),)


def test_violation_resets_streak():
    s = feed(GammaState(), [0.001] * 9 + [0.01])
    assert s.gamma == 1.0
    assert s.streak == 0


def test_twenty_observations_two_decays():
    assert feed(GammaState(), [0.001] * 20).gamma == 0.25


def test_boundary_counts_as_small():
    assert feed(GammaState(T=1), [0.005]).gamma == 0.5


def test_negative_kl_rejected():
    with pytest.raises(NegativeKL):
        observe_kl(GammaState(), -1e-3)


def test_pure_transition():
    s = GammaState(streak=4)
    assert observe_kl(s, 0.001) == observe_kl(s, 0.001)
    assert s.streak == 4


def test_independent_states():
    point, region = GammaState(), GammaState()
    point = feed(point, [0.0] * 10)
    assert point.gamma == 0.5
    assert region.gamma == 1.0


def reference_trajectory(kls, gamma0, lam, rho, T):
    """Window-based restatement: decay at step t iff the last T observations are all small
    and no decay happened inside that window."""
    gammas, last_decay, g = [], -10**9, gamma0
    for t in range(len(kls)):
        window = kls[max(0, t - T + 1): t + 1]
        if len(window) == T and all(k <= rho for k in window) and t - last_decay >= T:
            g *= lam
            last_decay = t
        gammas.append(g)
    return gammas


@given(
    st.lists(st.sampled_from([0.0, 0.002, 0.005, 0.0051, 0.02]), max_size=80),
    st.integers(1, 6),
    st.sampled_from([0.1, 0.5, 0.9]),
)
def test_decay_iff_window_small(kls, T, lam):
    state, gammas = replay(GammaState(gamma=1.0, lam=lam, rho=0.005, T=T), kls)
    assert gammas == pytest.approx(reference_trajectory(kls, 1.0, lam, 0.005, T), rel=0, abs=0)
    # every value is gamma0 * lam**k, non-increasing
    for g in gammas:
        k = round(math.log(g) / math.log(lam))
        assert g == pytest.approx(lam ** k, rel=1e-12)
    assert all(b <= a for a, b in zip(gammas, gammas[1:]))
    assert 0 <= state.streak <= T


def test_plateau_then_decay_trace():
    # KL high while the model is still forming clusters, then small: gamma
    # holds, then steps down once per T small observations.
    kls = [0.05] * 30 + [0.001] * 40
    _, gammas = replay(GammaState(), kls)
    assert gammas[:39] == [1.0] * 39
    assert gammas[39] == 0.5
    assert gammas[-1] == 1.0 / 16
    assert len(set(gammas)) == 5


class TestBaselines:
    def test_step_decay(self):
        assert step_decay(1.0, 0.1, 2) == pytest.approx(0.01)
        assert step_decay(0.7, 0.3, 0) == 0.7
        assert step_decay(1.0, 0.5, 3) == 0.125

    def test_cosine_endpoints(self):
        assert cosine_anneal(1.0, 0.01, 0, 10) == 1.0
        assert cosine_anneal(1.0, 0.01, 10, 10) == 0.01
        assert cosine_anneal(1.0, 0.0, 5, 10) == pytest.approx(0.5, abs=1e-15)

    def test_cosine_out_of_range(self):
        with pytest.raises(OutOfRange):
            cosine_anneal(1.0, 0.1, 11, 10)

    def test_cosine_monotone(self):
        vals = [cosine_anneal(1.0, 0.05, t, 50) for t in range(51)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_indicator():
    assert indicator(2.5, 0.7, 0.0) == 2.5
    assert indicator(1.0, 0.5, 0.2) == pytest.approx(1.1)
    with pytest.raises(NegativeKL):
        indicator(1.0, 1.0, -0.1)
