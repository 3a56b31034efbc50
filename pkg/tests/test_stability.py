import json
import math

import numpy as np
import pytest

from stabcert import sysdef
from stabcert.errors import HypothesisError
from stabcert.stability import (A5Unverified, A7Unverifiable, BudgetExceeded, ConstantsError,
                                DisturbanceBounds, ball_exponentially_stable, certify,
                                certify_system, check_uniformity, choose_s, compute_constants,
                                corollary_bound, disturbance_bounds, envelope_value,
                                exponentially_stable, observe, practical_ball,
                                sup_weighted_lambda, uniformly_bounded, verify_A5)
from stabcert.transition import ExpEnvelope, PerturbationBudget

E = math.e
SQRT021 = math.sqrt(0.21)
ENV = ExpEnvelope(1.0, 1.0)
BUDGET2 = PerturbationBudget(k=1.0, c=1.0, gamma=1.0)
BUDGET1 = PerturbationBudget(k=math.sqrt(2.0), c=1.0, gamma=1.0)


@pytest.fixture(scope="module")
def dist2(ex2):
    return disturbance_bounds(ex2, 0.1, 0.9, 1.0)


@pytest.fixture(scope="module")
def tc2(dist2):
    return compute_constants(ENV, BUDGET2, dist2, 0.1, r=1 / 0.9, K=1.0)


def test_example2_constants(tc2):
    assert tc2.gamma_eps == pytest.approx(0.9, abs=1e-15)
    assert tc2.M_prime == pytest.approx(SQRT021, abs=1e-12)
    assert tc2.s == 0.0
    assert tc2.M_s == pytest.approx(1.0, abs=1e-10)
    assert tc2.delta == 0.9 or tc2.delta == pytest.approx(0.9, abs=1e-15)
    assert tc2.L == pytest.approx(E, abs=1e-12)
    assert tc2.N == pytest.approx(E / 0.9, abs=1e-10)
    assert tc2.theta == pytest.approx(0.9 - SQRT021 * 0.9, abs=1e-10)
    assert tc2.theta == pytest.approx(0.4875681874, abs=1e-10)
    assert tc2.K_mode == "override"


def test_example2_theorem_K(dist2):
    tc = compute_constants(ENV, BUDGET2, dist2, 0.1)
    assert tc.K == 2.0 and tc.K_mode == "theorem"
    assert tc.r_min == pytest.approx(2 * SQRT021 / 0.9, rel=1e-12)
    assert tc.r_min == pytest.approx(1.0183501544, abs=1e-10)
    assert tc.r == pytest.approx(2.0367003089, abs=1e-9)
    assert tc.L == pytest.approx(2 * E ** 2, rel=1e-12)
    assert tc.N == pytest.approx(tc.r * 2 * E ** 2 / 2, rel=1e-15)
    assert tc.N == pytest.approx(15.0492928, abs=1e-6)


def test_unperturbed_limit(ex1):
    dist = disturbance_bounds(ex1, 0.0, 1.0)
    assert dist.M_prime == 0.0
    tc = compute_constants(ENV, BUDGET1, dist, 0.0)
    assert (tc.M_s, tc.N, tc.delta, tc.theta) == (0.0, 0.0, 1.0, 1.0)
    assert envelope_value(tc, 3.0, 0.0, 2.0) == pytest.approx(2 * 3.0 * math.exp(-2.0), rel=1e-15)


def test_envelope_values(tc2):
    x0 = math.sqrt(5.0)
    assert envelope_value(tc2, x0, 0.0, 0.0) == pytest.approx(tc2.L * x0 + tc2.N, rel=1e-15)
    expected = E * x0 * math.exp(-4.5) + (E / 0.9) * math.exp(-5 * (0.9 - 0.9 * SQRT021))
    assert envelope_value(tc2, x0, 0.0, 5.0) == pytest.approx(expected, rel=1e-9)
    assert envelope_value(tc2, x0, 0.0, 5.0) == pytest.approx(0.3316, abs=1e-3)
    assert envelope_value(tc2, x0, 0.0, 1e4) < 1e-300 + 1e-100


def test_practical_ball(tc2, ex2):
    assert practical_ball(tc2) == pytest.approx(SQRT021 / 0.9 * E, rel=1e-12)
    # for p = 1 it equals (K M'/gamma_eps) e^(K ||phi||_1)
    assert practical_ball(tc2) == pytest.approx(SQRT021 / 0.9 * math.exp(tc2.M_s), rel=1e-12)
    radii = []
    for eps in (1e-2, 1e-4, 1e-6):
        d = disturbance_bounds(ex2, eps, 1 - eps, 1.0)
        radii.append(practical_ball(compute_constants(ENV, BUDGET2, d, eps, K=1.0)))
    assert radii[0] > radii[1] > radii[2] and radii[2] < 5e-3


def test_practical_ball_without_lambda(ex1):
    tc = compute_constants(ENV, BUDGET1, disturbance_bounds(ex1, 0.3, BUDGET1.gamma_eps(0.3)), 0.3)
    assert practical_ball(tc) == 0.0


def test_corollary(tc2, ex1):
    P = corollary_bound(tc2)
    assert P == pytest.approx(E + (E / 0.9) * 0.9, rel=1e-12)
    assert P == pytest.approx(5.4365636569, abs=1e-9)
    assert P > tc2.L
    tc0 = compute_constants(ENV, BUDGET1, disturbance_bounds(ex1, 0.3, 0.5), 0.3)
    assert corollary_bound(tc0) == tc0.L


@pytest.mark.parametrize("eps", [0.05, 0.3, 0.6, 0.85])
@pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 4.0])
@pytest.mark.parametrize("r", ["auto", 3.0])
@pytest.mark.parametrize("K", [None, 1.0])
def test_constant_consistency(ex2, eps, p, r, K):
    d = disturbance_bounds(ex2, eps, BUDGET2.gamma_eps(eps), p)
    try:
        tc = compute_constants(ENV, BUDGET2, d, eps, r=r, K=K)
    except ConstantsError:
        assert r == 3.0
        return
    assert tc.delta <= tc.gamma_eps
    assert 0 < tc.theta < tc.delta
    assert tc.N == tc.r * tc.L / tc.K
    assert tc.r > tc.r_min
    assert tc.L >= tc.K


def test_choose_s():
    assert choose_s("1/(1+t^2)^(3/2)", 1.0, 0.9, 1.0)[0] == 0.0
    s, M = choose_s("1/(1+t^2)^(3/2)", 2.0, 0.9, 1.0)
    assert s == 0.0 and M <= 1.0
    # a large bump near the origin pushes s out; M_s = 50 e^(-5 s) / sqrt(10) exactly
    s, M = choose_s("50*exp(-5*t)", 2.0, 0.9, 1.0)
    assert s == 1.0
    assert M == pytest.approx(50 * math.exp(-5.0) / math.sqrt(10.0), rel=1e-8)
    assert 50 / math.sqrt(10.0) >= 1.8
    with pytest.raises(HypothesisError):
        choose_s("(1+t)^(-0.6)", 2.0, 0.1, 1.0, max_doublings=10)


def test_constants_errors(ex2, dist2):
    with pytest.raises(BudgetExceeded):
        compute_constants(ENV, BUDGET2, dist2, 1.0)
    with pytest.raises(ConstantsError) as info:
        compute_constants(ENV, BUDGET2, dist2, 0.1, r=0.3, K=1.0)
    assert info.value.partial["N"] == pytest.approx(0.3 * E, rel=1e-12)
    heavy = DisturbanceBounds("5/(1+t^2)", 0.0, 2.0, 0.0, 1e3)
    with pytest.raises(ConstantsError):
        compute_constants(ENV, BUDGET2, heavy, 0.1, s=0.0)


def test_verify_A5(ex1, ex2):
    rep = verify_A5(ex1, 0.3)
    assert rep.max_excess == 0.0 and rep.verified
    rep = verify_A5(ex2, 0.1, sample_budget=3000)
    assert rep.verified
    lin = sysdef.from_document({"name": "lin", "dim": 2, "A0": [["-1", "0"], ["0", "-1"]],
                                "F": [["0", "0"], ["0", "0"]], "h": ["x1", "x2"], "x0": [1, 0]})
    rep = verify_A5(lin, 0.0, "0.5", "0")
    assert not rep.verified and rep.max_excess > 0


def test_weighted_lambda_sup():
    assert sup_weighted_lambda("sqrt(eps*(2+eps))*exp(-t)", 0.1, 0.9) == pytest.approx(SQRT021, rel=1e-12)
    with pytest.raises(A7Unverifiable):
        sup_weighted_lambda("exp(-0.5*t)", 0.1, 0.9)


def test_metadata_M_prime_is_honored(ex2):
    d = json.loads(sysdef.dumps(ex2))
    d["meta"]["M_prime"] = 0.5
    s = sysdef.from_document(d)
    assert disturbance_bounds(s, 0.1, 0.9).M_prime == 0.5


def test_missing_bounds_for_nonzero_h(ex2):
    d = json.loads(sysdef.dumps(ex2))
    del d["meta"]["phi"], d["meta"]["lambda"]
    with pytest.raises(A5Unverified):
        certify_system(sysdef.from_document(d), 0.1)


# certificates ------------------------------------------------------------

@pytest.fixture(scope="module")
def cert2(ex2):
    return certify_system(ex2, 0.1, K=1.0, r=1 / 0.9, tf=30.0)


def test_certify_example2(cert2):
    assert cert2.passed
    assert cert2.ball_radius == pytest.approx(3.0203131427, abs=1e-9)
    assert cert2.ball_entry_t == 0.0
    late = cert2.norms[cert2.times >= 20.0]
    assert np.all(late < 0.1)
    bound = E * math.sqrt(5) * np.exp(-0.9 * cert2.times) + 3.0204
    assert np.all(cert2.norms <= bound)
    rep = cert2.report()
    for key in ("system", "eps", "constants", "pass", "max_ratio", "first_violation_t",
                "ball_radius", "ball_entry_t"):
        assert key in rep
    assert rep["first_violation_t"] is None
    assert any("K overridden" in n for n in rep["notes"])


def test_certify_example1(ex1):
    cert = certify_system(ex1, 0.5)
    assert cert.passed and cert.constants.K == 2.0
    assert cert.constants.gamma_eps == pytest.approx(1 - math.sqrt(2) / 2, abs=1e-15)
    assert cert.max_ratio == pytest.approx(0.5, rel=1e-6)
    assert exponentially_stable(cert)


def test_certify_over_budget(ex1):
    with pytest.raises(BudgetExceeded, match="0.7071067812"):
        certify_system(ex1, 0.8)


def test_observe_growth(ex1):
    obs = observe(ex1, 2.0, tf=10.0)
    assert obs.growth_rate == pytest.approx(1.0, rel=1e-4)
    assert obs.growing
    assert not observe(ex1, 1.0, tf=10.0).growing


def test_failed_certificate_is_reported(ex1):
    # constants of eps = 0 applied to the eps = 0.7 trajectory must fail
    tc = compute_constants(ENV, BUDGET1, disturbance_bounds(ex1, 0.0, 1.0), 0.0)
    cert = certify(ex1, 0.7, tc, tf=20.0)
    assert not cert.passed
    assert cert.first_violation_t is not None and cert.first_violation_t > 0


def test_ball_exponential_stability(cert2):
    assert ball_exponentially_stable(cert2)
    assert uniformly_bounded(cert2)
    assert not exponentially_stable(cert2)


def test_ball_entry(cert2):
    tail = cert2.norms[cert2.times >= 0.75 * cert2.times[-1]]
    assert tail.max() <= practical_ball(cert2.constants) + 1e-3


def test_uniformity_in_t0(ex2, tc2):
    certs = check_uniformity(ex2, 0.1, tc2)
    assert [c.t0 for c in certs] == [0.0, 1.0, 5.0, 10.0]
    assert all(c.passed for c in certs)


def test_gamma_eps_slope(ex1):
    eps = np.linspace(0.0, 0.7, 8)
    g = [compute_constants(ENV, BUDGET1, disturbance_bounds(ex1, e, 1.0), e).gamma_eps for e in eps]
    assert np.diff(g) / np.diff(eps) == pytest.approx(-math.sqrt(2) * np.ones(7), rel=1e-12)


def random_admissible_system(rng, n):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    mu = rng.uniform(0.5, 1.5, n)
    A0 = Q @ np.diag(-mu) @ Q.T
    F = rng.normal(size=(n, n))
    F /= np.linalg.norm(F, 2)
    F *= rng.uniform(0.2, 2.0)
    a = rng.uniform(0.05, 0.3)
    u = rng.uniform(-0.9, 0.9, n)
    v = rng.normal(size=n)
    v *= rng.uniform(0.1, 0.9) / np.linalg.norm(v)
    num = lambda x: repr(float(x))
    h = [f"{num(a * u[i])}/(1+t^2)*x{i + 1}*cos(x{(i + 1) % n + 1}) + {num(v[i])}*sqrt(eps)*exp(-2*t)"
         for i in range(n)]
    doc = {"name": "random", "dim": n,
           "A0": [[num(x) for x in row] for row in A0],
           "F": [[num(x) for x in row] for row in F],
           "h": h, "x0": rng.uniform(-3, 3, n).tolist(),
           "meta": {"c": 1, "gamma": float(mu.min()), "phi": f"{num(a)}/(1+t^2)",
                    "lambda": "sqrt(eps)*exp(-2*t)"}}
    return sysdef.from_document(doc)


def envelope_soundness(n_systems=20, seed=0):
    """Certify random admissible systems on an eps grid below the threshold."""
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_systems):
        s = random_admissible_system(rng, int(rng.integers(2, 4)))
        k = float(np.linalg.norm(s.F_at(0.0), 2))
        for frac in (0.0, 0.3, 0.6, 0.9):
            eps = frac * s.meta.gamma / k
            cert = certify_system(s, eps, tf=15.0, a5_budget=400, k=k)
            results.append(cert)
    return results


def test_envelope_soundness_random_systems():
    certs = envelope_soundness()
    assert len(certs) == 80
    assert all(c.passed for c in certs)
    for c in certs:
        if c.constants.M_prime > 0:
            tail = c.norms[c.times >= 0.75 * c.times[-1]]
            assert tail.max() <= practical_ball(c.constants) + 1e-3
