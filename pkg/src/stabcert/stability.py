"""Explicit envelopes for x' = A_eps(t) x + h(t, x, eps) and their numerical check.

Given the nominal envelope (c, gamma), ``k = sup ||F||`` and the disturbance
bound ``||h(t, x, eps)|| <= phi(t) ||x|| + lam(t, eps)`` with phi in L^p and
``lam(t) <= M' exp(-gamma_eps t)``, every solution satisfies

    ||x(t)|| <= L ||x0|| exp(-delta (t - t0)) + N exp(-theta t)

with

    gamma_eps = gamma - k c eps                delta = gamma_eps - K (p-1)/p M_s
    r > r_min = K M' / delta                   theta = delta - K M' / r
    L = K exp(K (M_s / p + int_0^s phi))       N = r L / K

where ``K = c + 1`` unless overridden by a tighter bound on ``||R_eps||``.
``certify`` integrates the system and compares it with that envelope.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np

from . import expr as ex
from .errors import HypothesisError, ValidationError
from .gronwall import as_time_function, lp_tail_norm
from .ode import IntegratorConfig, Trajectory, integrate
from .quadrature import NoDecayError, quad
from .sysdef import SystemDef, rhs
from .transition import (ExpEnvelope, PerturbationBudget, fit_envelope, perturbation_budget,
                         sup_F_norm)

__all__ = [
    "A5Report", "DisturbanceBounds", "TheoremConstants", "Certificate", "Observation",
    "BudgetExceeded", "A5Unverified", "A7Unverifiable", "ConstantsError",
    "verify_A5", "disturbance_bounds", "sup_weighted_lambda", "choose_s", "compute_constants",
    "envelope_value", "practical_ball", "corollary_bound", "certify", "observe",
    "certify_system", "exponentially_stable", "ball_exponentially_stable",
    "uniformly_bounded", "check_uniformity",
]

# Certificates compare relative quantities down to tiny norms, so the error
# control must be relative all the way to zero.
_TINY = float(np.finfo(float).tiny)
CERTIFY_CONFIG = IntegratorConfig(abs_tol=1e-20, rel_tol=1e-10)

M_ASSUMPTION_NOTE = "practical-ball p=1 formula uses M = M' = sup_t exp(gamma_eps t) lambda(t)"


class BudgetExceeded(HypothesisError):
    pass


class A5Unverified(HypothesisError):
    pass


class A7Unverifiable(HypothesisError):
    pass


class ConstantsError(HypothesisError):
    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial or {}


def _as_lambda(lam) -> Callable[[float, float], float]:
    if isinstance(lam, str):
        lam = ex.parse(lam, allowed=("t", "eps"))
    if isinstance(lam, ex.ScalarExpr):
        g = ex.compile_expr(lam)
        return lambda t, eps: g(float(t), (), float(eps))
    if isinstance(lam, (int, float)):
        v = float(lam)
        return lambda t, eps: v
    if callable(lam):
        return lam
    raise TypeError(f"cannot use {lam!r} as lambda(t, eps)")


_ZERO_PHI = ex.Num(0.0)


def _system_bounds(sys: SystemDef):
    """(phi, lam) from metadata; zero when h vanishes identically."""
    phi, lam = sys.meta.phi, sys.meta.lam
    if phi is None and lam is None and sys.h_is_zero:
        return _ZERO_PHI, _ZERO_PHI
    if phi is None or lam is None:
        raise A5Unverified(
            f"system {sys.name!r} has a nonzero h but no (phi, lambda) pair in its metadata")
    return phi, lam


# ---------------------------------------------------------------------------
# growth bound ||h(t, x, eps)|| <= phi(t) ||x|| + lambda(t, eps)

@dataclass
class A5Report:
    eps: float
    samples: int
    max_excess: float
    worst_t: float
    worst_x: tuple[float, ...]

    @property
    def verified(self) -> bool:
        return self.max_excess <= 0.0


def verify_A5(sys: SystemDef, eps: float, phi=None, lam=None, sample_budget: int = 4000,
              t_max: float = 20.0, x_radius: float = 10.0, seed: int = 0) -> A5Report:
    """Sample ``||h|| - (phi ||x|| + lam)`` over ``[0, t_max] x {||x|| <= x_radius}``.

    Half the budget goes to a tensor grid (points outside the ball are
    dropped), the rest to uniform random draws in the ball. A positive
    maximum means the bound is violated somewhere.
    """
    if phi is None and lam is None:
        phi, lam = _system_bounds(sys)
    phi_f = as_time_function(phi if phi is not None else 0.0)
    lam_f = _as_lambda(lam if lam is not None else 0.0)
    n = sys.n
    rng = np.random.default_rng(seed)

    half = max(sample_budget // 2, 1)
    per_axis = max(2, int(round(half ** (1.0 / (n + 1)))))
    ts = np.linspace(0.0, t_max, per_axis)
    axis = np.linspace(-x_radius, x_radius, per_axis)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), -1).reshape(-1, n)
    mesh = mesh[np.linalg.norm(mesh, axis=1) <= x_radius * (1 + 1e-12)]
    pts = [(t, x) for t in ts for x in mesh]

    n_rand = max(sample_budget - len(pts), 0)
    dirs = rng.normal(size=(n_rand, n))
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-300)
    radii = x_radius * rng.random(n_rand) ** (1.0 / n)
    t_rand = t_max * rng.random(n_rand)
    pts.extend(zip(t_rand, dirs * radii[:, None]))

    worst = (-math.inf, 0.0, (0.0,) * n)
    for t, x in pts:
        hn = float(np.linalg.norm(sys.h_at(t, x, eps)))
        excess = hn - (phi_f(t) * float(np.linalg.norm(x)) + lam_f(t, eps))
        if excess > worst[0]:
            worst = (excess, float(t), tuple(map(float, x)))
    return A5Report(eps=eps, samples=len(pts), max_excess=worst[0],
                    worst_t=worst[1], worst_x=worst[2])


# ---------------------------------------------------------------------------
# integrability of phi and decay of lambda

@dataclass(frozen=True)
class DisturbanceBounds:
    phi: object
    lam: object
    p: float
    M_prime: float
    T_sup: float
    M_prime_source: Literal["analytic", "grid"] = "grid"


def sup_weighted_lambda(lam, eps: float, gamma_eps: float, T_sup: float = 1e3,
                        points_per_decade: int = 400) -> float:
    """``sup_{0<=t<=T_sup} exp(gamma_eps t) lam(t, eps)`` on a log-spaced grid.

    Raises ``A7Unverifiable`` if the maximum over the last decade exceeds the
    one over the decade before (the weighted function is still growing).
    """
    lam_f = _as_lambda(lam)
    edges = [0.0, 1.0]
    while edges[-1] < T_sup:
        edges.append(min(edges[-1] * 10.0, T_sup))
    maxima = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        ts = np.linspace(lo, hi, points_per_decade)
        best = 0.0
        for t in ts:
            v = lam_f(t, eps)
            if v < 0:
                raise A5Unverified(f"lambda negative ({v:.3g}) at t={t:.6g}")
            # subnormal samples have lost their relative precision
            if v >= _TINY:
                best = max(best, math.exp(min(gamma_eps * t + math.log(v), 709.0)))
        maxima.append(best)
    if len(maxima) >= 2 and maxima[-1] > maxima[-2] * (1 + 1e-9):
        raise A7Unverifiable(
            f"exp(gamma_eps t) lambda(t) still grows on [{edges[-2]:g}, {edges[-1]:g}] "
            f"({maxima[-2]:.6g} -> {maxima[-1]:.6g}); no finite M' detected")
    return max(maxima)


def disturbance_bounds(sys: SystemDef, eps: float, gamma_eps: float, p: float = 1.0,
                       T_sup: float = 1e3, phi=None, lam=None) -> DisturbanceBounds:
    if phi is None and lam is None:
        phi, lam = _system_bounds(sys)
    if sys.meta.M_prime is not None:
        return DisturbanceBounds(phi, lam, p, sys.meta.M_prime, T_sup, "analytic")
    M = sup_weighted_lambda(lam, eps, gamma_eps, T_sup)
    return DisturbanceBounds(phi, lam, p, M, T_sup, "grid")


def choose_s(phi, p: float, gamma_eps: float, K: float, max_doublings: int = 20) -> tuple[float, float]:
    """Smallest s in {0, 1, 2, 4, ...} with ``M_s < (gamma_eps / K) p / (p - 1)``.

    For p = 1 the condition is vacuous: s = 0 and M_0 = ||phi||_1.
    """
    try:
        if p == 1:
            return 0.0, lp_tail_norm(phi, 1.0, 0.0)[0]
        limit = (gamma_eps / K) * p / (p - 1.0)
        for s in [0.0] + [2.0 ** j for j in range(max_doublings + 1)]:
            M_s, _ = lp_tail_norm(phi, p, s)
            if M_s < limit:
                return s, M_s
    except NoDecayError as exc:
        raise HypothesisError(f"phi is numerically not in L^{p:g}: {exc}") from exc
    raise HypothesisError(
        f"no split point s <= {2.0 ** max_doublings:g} with M_s < {limit:.6g}")


# ---------------------------------------------------------------------------
# constants

@dataclass(frozen=True)
class TheoremConstants:
    eps: float
    c: float
    gamma: float
    k: float
    K: float
    K_mode: str
    gamma_eps: float
    p: float
    s: float
    M_s: float
    phi_head: float
    M_prime: float
    r: float
    r_min: float
    delta: float
    theta: float
    L: float
    N: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_constants(env: ExpEnvelope, budget: PerturbationBudget, dist: DisturbanceBounds,
                      eps: float, r: float | str = "auto", K: float | None = None,
                      s: float | None = None) -> TheoremConstants:
    """Full constant set of the envelope for one eps.

    ``r="auto"`` picks ``2 r_min`` (or 0 when M' = 0, which removes the
    ``N`` term). ``K=None`` uses ``c + 1``.
    """
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    gamma_eps = budget.gamma_eps(eps)
    if not eps < budget.eps_star or not gamma_eps > 0:
        raise BudgetExceeded(
            f"eps={eps:g} >= eps*={budget.eps_star:.10g} (gamma/(k c)); "
            "decay rate gamma_eps would be <= 0, no certificate")
    K_mode = "theorem" if K is None else "override"
    K = budget.K if K is None else float(K)
    if not K > 0:
        raise ValidationError("K must be positive")
    p = float(dist.p)
    if not p >= 1:
        raise ValidationError("p must be >= 1")
    if s is None:
        s, M_s = choose_s(dist.phi, p, gamma_eps, K)
    else:
        M_s = lp_tail_norm(dist.phi, p, s)[0]
    phi_f = as_time_function(dist.phi)
    phi_head = quad(phi_f, 0.0, s, 1e-13, nonnegative=True) if s > 0 else 0.0

    delta = gamma_eps - K * (p - 1.0) / p * M_s
    L = K * math.exp(K * (M_s / p + phi_head))
    partial = dict(eps=eps, c=env.c, gamma=env.gamma, k=budget.k, K=K, K_mode=K_mode,
                   gamma_eps=gamma_eps, p=p, s=s, M_s=M_s, phi_head=phi_head,
                   M_prime=dist.M_prime, delta=delta, L=L)
    if not delta > 0:
        raise ConstantsError(f"delta={delta:.6g} <= 0: tail norm M_s={M_s:.6g} too large", partial)
    M = dist.M_prime
    r_min = K * M / delta
    partial["r_min"] = r_min
    if r == "auto":
        r = 2.0 * r_min
    r = float(r)
    if M == 0.0:
        theta = delta
    else:
        if not r > r_min:
            partial["r"] = r
            partial["N"] = r * L / K
            raise ConstantsError(f"r={r:.10g} must exceed r_min={r_min:.10g}", partial)
        theta = delta - K * M / r
    partial.update(r=r, theta=theta, N=r * L / K)
    return TheoremConstants(**partial)


def envelope_value(tc: TheoremConstants, x0_norm: float, t0: float, t):
    """``L |x0| exp(-delta (t - t0)) + N exp(-theta t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t < t0):
        raise ValidationError("envelope is defined for t >= t0")
    out = tc.L * x0_norm * np.exp(-tc.delta * (t - t0)) + tc.N * np.exp(-tc.theta * t)
    return float(out) if out.ndim == 0 else out


def practical_ball(tc: TheoremConstants) -> float:
    """Ball radius in the limit ``r -> r_min``: ``r_min L / K``.

    For p = 1 this equals ``(K M' / gamma_eps) exp(K ||phi||_1)``.
    """
    return tc.r_min * tc.L / tc.K


def corollary_bound(tc: TheoremConstants, r: float | None = None) -> float:
    """``P = L + N / r``: outside the ball of radius r, ``||x|| <= P |x0| exp(-theta (t-t0))``."""
    r = tc.r if r is None else r
    if tc.N == 0:
        return tc.L
    if not r > tc.r_min:
        raise ValidationError(f"r={r} must exceed r_min={tc.r_min}")
    return tc.L + tc.N / r


# ---------------------------------------------------------------------------
# certificates

@dataclass
class Certificate:
    system: str
    eps: float
    t0: float
    x0: tuple[float, ...]
    constants: TheoremConstants
    times: np.ndarray
    norms: np.ndarray
    envelope: np.ndarray
    tol: float = 1e-6
    escape_time: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.envelope > 0, self.norms / self.envelope,
                            np.where(self.norms > 0, np.inf, 0.0))

    @property
    def max_ratio(self) -> float:
        return float(self.ratios.max()) if self.ratios.size else math.inf

    @property
    def passed(self) -> bool:
        return self.escape_time is None and self.max_ratio <= 1.0 + self.tol

    @property
    def first_violation_t(self) -> float | None:
        if self.escape_time is not None and self.max_ratio <= 1.0 + self.tol:
            return self.escape_time
        bad = np.nonzero(self.ratios > 1.0 + self.tol)[0]
        return float(self.times[bad[0]]) if bad.size else None

    @property
    def ball_radius(self) -> float:
        return self.constants.N

    @property
    def ball_entry_t(self) -> float | None:
        """First sample time after which the norm stays within the ball."""
        outside = np.nonzero(self.norms > self.ball_radius)[0]
        if outside.size == 0:
            return float(self.times[0])
        j = outside[-1] + 1
        return float(self.times[j]) if j < self.times.size else None

    def report(self) -> dict:
        return {
            "system": self.system,
            "eps": self.eps,
            "t0": self.t0,
            "x0": list(self.x0),
            "constants": self.constants.as_dict(),
            "pass": self.passed,
            "max_ratio": self.max_ratio,
            "first_violation_t": self.first_violation_t,
            "ball_radius": self.ball_radius,
            "practical_ball_radius": practical_ball(self.constants),
            "ball_entry_t": self.ball_entry_t,
            "escape_time": self.escape_time,
            "tolerance": self.tol,
            "notes": list(self.notes),
        }


def certify(sys: SystemDef, eps: float, tc: TheoremConstants, t0: float = 0.0,
            tf: float = 30.0, cfg: IntegratorConfig | None = None, x0=None,
            tol: float = 1e-6) -> Certificate:
    """Integrate the full system and compare ``||x(t)||`` with the envelope on the grid."""
    x0 = np.array(sys.x0 if x0 is None else x0, dtype=float)
    traj = integrate(rhs(sys), x0, t0, tf, eps, cfg or CERTIFY_CONFIG)
    env = envelope_value(tc, float(np.linalg.norm(x0)), t0, traj.times)
    notes = []
    if tc.K_mode == "override":
        notes.append(f"K overridden to {tc.K:g} (theorem value would be c+1={tc.c + 1:g})")
    if tc.p == 1 and tc.M_prime > 0:
        notes.append(M_ASSUMPTION_NOTE)
    return Certificate(system=sys.name, eps=eps, t0=t0, x0=tuple(x0.tolist()), constants=tc,
                       times=traj.times, norms=traj.norms, envelope=np.atleast_1d(env),
                       tol=tol, escape_time=traj.escape_time, notes=notes)


@dataclass
class Observation:
    """Behaviour of a trajectory for which no certificate exists."""

    system: str
    eps: float
    trajectory: Trajectory
    growth_rate: float

    @property
    def final_norm(self) -> float:
        return float(self.trajectory.norms[-1])

    @property
    def escape_time(self) -> float | None:
        return self.trajectory.escape_time

    @property
    def growing(self) -> bool:
        return self.escape_time is not None or self.growth_rate > 1e-4


def observe(sys: SystemDef, eps: float, t0: float = 0.0, tf: float = 30.0,
            cfg: IntegratorConfig | None = None, x0=None) -> Observation:
    """Integrate and fit the exponential rate of ``||x||`` over the second half."""
    x0 = sys.x0 if x0 is None else x0
    traj = integrate(rhs(sys), x0, t0, tf, eps, cfg)
    norms = traj.norms
    half = traj.times >= traj.times[0] + 0.5 * (traj.times[-1] - traj.times[0])
    ok = half & (norms > 0)
    if traj.escape_time is not None:
        rate = math.inf
    elif ok.sum() >= 2:
        rate = float(np.polyfit(traj.times[ok], np.log(norms[ok]), 1)[0])
    else:
        rate = -math.inf
    return Observation(sys.name, eps, traj, rate)


def certify_system(sys: SystemDef, eps: float, *, p: float = 1.0, r: float | str = "auto",
                   K: float | str | None = None, t0: float = 0.0, tf: float = 30.0,
                   cfg: IntegratorConfig | None = None, T_sup: float = 1e3,
                   a5_budget: int = 2000, env: ExpEnvelope | None = None,
                   k: float | None = None) -> Certificate:
    """Whole pipeline: envelope, budget, hypothesis checks, constants, certificate.

    ``K`` is ``None`` (metadata override if any, else ``c + 1``), ``"theorem"``
    or a number. Raises ``HypothesisError`` subclasses when a hypothesis
    fails.
    """
    env = env or fit_envelope(sys)
    k = sup_F_norm(sys, T_sup) if k is None else k
    budget = perturbation_budget(env, k)
    if not budget.admits(eps):
        raise BudgetExceeded(
            f"eps={eps:g} >= eps*={budget.eps_star:.10g} = gamma/(k c) "
            f"(gamma={env.gamma:g}, k={k:.10g}, c={env.c:g}); no certificate. "
            "Above the threshold the system is uncertified, not necessarily unstable.")
    if K is None:
        K = sys.meta.K_override
    elif K == "theorem":
        K = None
    phi, lam = _system_bounds(sys)
    if not sys.h_is_zero:
        rep = verify_A5(sys, eps, phi, lam, sample_budget=a5_budget)
        if not rep.verified:
            raise A5Unverified(
                f"||h|| exceeds phi ||x|| + lambda by {rep.max_excess:.3g} at "
                f"t={rep.worst_t:.6g}, x={rep.worst_x}")
    dist = disturbance_bounds(sys, eps, budget.gamma_eps(eps), p, T_sup, phi, lam)
    tc = compute_constants(env, budget, dist, eps, r=r, K=K)
    return certify(sys, eps, tc, t0, tf, cfg)


# ---------------------------------------------------------------------------
# stability notions as predicates over certificates

def exponentially_stable(cert: Certificate) -> bool:
    """Exponential envelope with no residual ball (N = 0) held at every sample."""
    return cert.passed and cert.constants.N == 0.0


def ball_exponentially_stable(cert: Certificate) -> bool:
    """``||x|| <= L |x0| e^(-delta (t-t0)) + N`` at every sample: B_N is attractive."""
    if cert.escape_time is not None:
        return False
    tc = cert.constants
    x0n = float(np.linalg.norm(cert.x0))
    bound = tc.L * x0n * np.exp(-tc.delta * (cert.times - cert.t0)) + tc.N
    return bool(np.all(cert.norms <= bound * (1 + cert.tol)))


def uniformly_bounded(cert: Certificate) -> bool:
    tc = cert.constants
    return cert.passed and bool(
        np.all(cert.norms <= (tc.L * float(np.linalg.norm(cert.x0)) + tc.N) * (1 + cert.tol)))


def check_uniformity(sys: SystemDef, eps: float, tc: TheoremConstants,
                     t0_grid=(0.0, 1.0, 5.0, 10.0), horizon: float = 20.0,
                     cfg: IntegratorConfig | None = None, x0=None) -> list[Certificate]:
    """Certificates for several initial times (uniformity in t0, spot-checked)."""
    return [certify(sys, eps, tc, t0, t0 + horizon, cfg, x0) for t0 in t0_grid]
