import math

import numpy as np
import pytest

from stabcert import sysdef
from stabcert.errors import HypothesisError
from stabcert.linalg import matrix_norm
from stabcert.quadrature import quad
from stabcert.transition import (ExpEnvelope, NotExponentiallyStable, PerturbationBudget,
                                 epsilon_threshold, fit_envelope, perturbation_budget,
                                 series_remainder_bound, series_terms, series_vs_direct,
                                 sup_F_norm, term_bound, transition_matrix)

SQRT2 = math.sqrt(2.0)


def rotation_closed_form(t, t0=0.0):
    th = 0.5 * (t * t - t0 * t0)
    return math.exp(-(t - t0)) * np.array([[math.cos(th), -math.sin(th)],
                                           [math.sin(th), math.cos(th)]])


def small_system(A0, F, name="s"):
    return sysdef.from_document({"name": name, "dim": 2, "A0": A0, "F": F,
                                 "h": ["0", "0"], "x0": [1, 0]})


# transition matrices -----------------------------------------------------

def test_nominal_example1(ex1):
    traj = transition_matrix(ex1, 0.0, 0.0, 3.0)
    assert np.all(traj.states[0] == np.eye(2))
    err = max(np.abs(R - rotation_closed_form(t)).max() for t, R in zip(traj.times, traj.states))
    assert err < 1e-8


def test_nominal_example2(ex2):
    traj = transition_matrix(ex2, 0.0, 1.0, 4.0)
    expected = np.exp(-(traj.times - 1.0))[:, None, None] * np.eye(2)
    assert np.abs(traj.states - expected).max() < 1e-9


def test_degenerate_interval(ex1):
    traj = transition_matrix(ex1, 0.3, 2.0, 2.0)
    assert traj.times.tolist() == [2.0]
    assert np.all(traj.states[0] == np.eye(2))


def test_negative_eps_rejected(ex1):
    with pytest.raises(ValueError):
        transition_matrix(ex1, -0.1, 0.0, 1.0)


# envelopes and budgets ---------------------------------------------------

def test_metadata_envelopes(ex1, ex2):
    for s in (ex1, ex2):
        env = fit_envelope(s)
        assert (env.c, env.gamma, env.provenance) == (1.0, 1.0, "analytic")


def test_fitted_envelope_example1(ex1):
    env = fit_envelope(ex1, use_metadata=False)
    assert env.provenance == "fitted"
    assert env.gamma == pytest.approx(1.0, rel=1e-6)
    assert env.c == pytest.approx(1.0, rel=1e-5)
    for t0 in (0.0, 1.0, 5.0, 10.0):
        traj = transition_matrix(ex1, 0.0, t0, t0 + 10.0, t_eval=t0 + np.linspace(0, 10, 201))
        assert np.all(traj.norms <= env(traj.times - t0) * (1 + 1e-12))


def test_fitted_envelope_covers_samples():
    s = small_system([["-2", "1"], ["0", "-1"]], [["0", "0"], ["0", "0"]])
    env = fit_envelope(s)
    assert env.gamma > 0
    # coverage is promised at the fitting samples (spacing horizon / 200)
    traj = transition_matrix(s, 0.0, 0.0, 10.0, t_eval=np.linspace(0, 10, 201))
    assert np.all(traj.norms <= env(traj.times) * (1 + 1e-12))


def test_unstable_nominal_rejected():
    s = small_system([["1", "0"], ["0", "-1"]], [["0", "0"], ["0", "0"]])
    with pytest.raises(NotExponentiallyStable):
        fit_envelope(s)


def test_sup_F_norm(ex1, ex2):
    assert sup_F_norm(ex1) == pytest.approx(SQRT2, rel=1e-15)
    assert sup_F_norm(ex2) == pytest.approx(1.0, rel=1e-12)
    zero = small_system([["-1", "0"], ["0", "-1"]], [["0", "0"], ["0", "0"]])
    assert sup_F_norm(zero) == 0.0


def test_sup_F_norm_interior_maximum():
    # ||F(t)|| = |t e^(-t)| peaks at t = 1 with value 1/e
    s = small_system([["-1", "0"], ["0", "-1"]], [["t*exp(-t)", "0"], ["0", "0"]])
    assert sup_F_norm(s) == pytest.approx(1 / math.e, rel=1e-10)


def test_thresholds():
    env = ExpEnvelope(1.0, 1.0)
    assert epsilon_threshold(env, SQRT2) == pytest.approx(1 / SQRT2, abs=1e-12)
    assert epsilon_threshold(env, 1.0) == 1.0
    assert math.isinf(epsilon_threshold(env, 0.0))
    b = perturbation_budget(env, SQRT2)
    assert b.K == 2.0
    assert b.admits(0.7) and not b.admits(0.71)
    assert b.gamma_eps(0.5) == pytest.approx(1 - SQRT2 / 2, abs=1e-15)


def test_threshold_decreases_with_k():
    env = ExpEnvelope(2.0, 0.7)
    ks = np.linspace(0.1, 10.0, 50)
    stars = [epsilon_threshold(env, k) for k in ks]
    assert np.all(np.diff(stars) < 0)


def test_gamma_eps_linear_in_eps():
    b = PerturbationBudget(k=SQRT2, c=1.0, gamma=1.0)
    eps = np.linspace(0.0, 0.7, 8)
    slopes = np.diff([b.gamma_eps(e) for e in eps]) / np.diff(eps)
    assert slopes == pytest.approx(-SQRT2 * np.ones(7), rel=1e-12)


@pytest.mark.parametrize("name, eps_values", [
    ("example1", (0.1, 0.4, 0.7)),
    ("example2", (0.1, 0.5, 0.9)),
])
@pytest.mark.parametrize("t0", (0.0, 1.0, 5.0))
def test_perturbed_envelope(name, eps_values, t0):
    s = sysdef.load(name)
    b = perturbation_budget(fit_envelope(s), sup_F_norm(s))
    for eps in eps_values:
        traj = transition_matrix(s, eps, t0, t0 + 15.0)
        env = b.K * np.exp(-b.gamma_eps(eps) * (traj.times - t0))
        assert np.all(traj.norms <= env * (1 + 1e-6))


# series ------------------------------------------------------------------

@pytest.fixture(scope="module")
def series1(ex1):
    return series_terms(ex1, 0.0, 2.0, 8, env=ExpEnvelope(1.0, 1.0), k=SQRT2)


def test_terms_vanish_at_start(series1):
    assert np.all(series1.Y[:, 0] == 0.0)
    assert np.all(series1.R0[0] == np.eye(2))


def test_terms_commuting_closed_form(series1):
    # A0 and F commute in the first example, so Y_i = R0 (F D)^i / i!
    F = np.array([[1.0, -1.0], [1.0, 1.0]])
    for i in range(1, 9):
        for t, Y in zip(series1.times[1::20], series1.Y[i - 1, 1::20]):
            exact = rotation_closed_form(t) @ np.linalg.matrix_power(F * t, i) / math.factorial(i)
            assert np.abs(Y - exact).max() <= 1e-8 * np.abs(exact).max()


def duhamel_Y1(t):
    """Y_1(t) = int_0^t R(t, s) F R(s, 0) ds by adaptive quadrature, entry by entry."""
    F = np.array([[1.0, -1.0], [1.0, 1.0]])
    out = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            out[i, j] = quad(lambda s: (rotation_closed_form(t, s) @ F @ rotation_closed_form(s))[i, j],
                             0.0, t, 1e-12)
    return out


def test_first_term_matches_duhamel(series1):
    i = int(np.argmin(np.abs(series1.times - 1.0)))
    assert np.abs(series1.Y[0, i] - duhamel_Y1(1.0)).max() < 1e-7


def test_first_term_matches_duhamel_example2(ex2):
    S = series_terms(ex2, 0.0, 1.5, 2)
    F = lambda s: np.array([[0.0, 1.0], [1.0 / (1.0 + s), 0.0]])
    t = S.times[-1]
    for (i, j) in ((0, 1), (1, 0)):
        v = quad(lambda s: math.exp(-(t - s)) * F(s)[i, j] * math.exp(-s), 0.0, t, 1e-13)
        assert S.Y[0, -1, i, j] == pytest.approx(v, abs=1e-9)


def max_term_bound_ratio(sys, m, tf, env, k) -> float:
    S = series_terms(sys, 0.0, tf, m, env=env, k=k)
    worst = -math.inf
    for i in range(1, m + 1):
        norms = np.array([matrix_norm(Y) for Y in S.Y[i - 1, 1:]])
        bound = term_bound(env, k, i, S.times[1:])
        worst = max(worst, float(np.max(norms / bound)))
    return worst


def test_term_bound_example1(ex1):
    assert max_term_bound_ratio(ex1, 8, 2.0, ExpEnvelope(1.0, 1.0), SQRT2) <= 1 + 1e-6


def test_term_bound_example2(ex2):
    assert max_term_bound_ratio(ex2, 6, 5.0, ExpEnvelope(1.0, 1.0), 1.0) <= 1 + 1e-6


def test_zero_F_gives_zero_terms():
    s = small_system([["-1", "t"], ["-t", "-1"]], [["0", "0"], ["0", "0"]])
    S = series_terms(s, 0.0, 2.0, 3)
    assert np.all(S.Y == 0.0)


def test_remainder_bound_values():
    env = ExpEnvelope(1.0, 1.0)
    x = SQRT2 * 0.1 * 2.0
    exact = math.exp(-2.0) * (math.exp(x) - sum(x ** i / math.factorial(i) for i in range(9)))
    got = series_remainder_bound(env, SQRT2, 0.1, 8, 2.0)
    assert got == pytest.approx(exact, rel=1e-6)
    assert got < 3.0e-9
    # m = 0 is the total bound of the series
    total = series_remainder_bound(env, SQRT2, 0.1, 0, 2.0)
    assert total == pytest.approx(math.exp(-2.0) * math.expm1(x), rel=1e-13)
    assert total <= math.exp((-1.0 + SQRT2 * 0.1) * 2.0)
    assert series_remainder_bound(env, SQRT2, 0.1, 60, 2.0) < 1e-60
    assert series_remainder_bound(env, SQRT2, 0.1, 3, 0.0) == 0.0


def test_series_vs_direct_example1(ex1, series1):
    env = ExpEnvelope(1.0, 1.0)
    rep = series_vs_direct(ex1, 0.1, 8, 0.0, 2.0, env, SQRT2, series=series1)
    assert rep.ok
    zero = series_vs_direct(ex1, 0.0, 8, 0.0, 2.0, env, SQRT2, series=series1)
    assert zero.max_deviation <= 1e-8


def test_series_deviation_nonincreasing_in_m(ex1, series1):
    env = ExpEnvelope(1.0, 1.0)
    devs = [series_vs_direct(ex1, 0.3, m, 0.0, 2.0, env, SQRT2, series=series1).deviation
            for m in range(1, 9)]
    for a, b in zip(devs, devs[1:]):
        assert np.all(b <= a + 1e-9)


def test_series_requires_admissible_eps(ex1, series1):
    with pytest.raises(HypothesisError):
        series_vs_direct(ex1, 0.8, 8, 0.0, 2.0, ExpEnvelope(1.0, 1.0), SQRT2, series=series1)
