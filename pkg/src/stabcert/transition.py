"""Transition matrices of x' = (A0(t) + eps F(t)) x and their perturbation series.

The perturbed transition matrix expands as ``R_eps = R_0 + sum_i eps^i Y_i``
with ``Y_i' = A0 Y_i + F Y_(i-1)``, ``Y_i(t0) = 0`` and ``Y_0 = R_0``. If
``||R_0(t, t0)|| <= c exp(-gamma (t - t0))`` and ``||F|| <= k`` then
``||Y_i(t)|| <= (k c)^i exp(-gamma D) D^i / i!`` with ``D = t - t0``, so
``||R_eps|| <= (c + 1) exp(-(gamma - k c eps) D)`` for eps < gamma / (k c).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import HypothesisError, NumericalError
from .linalg import matrix_norm
from .ode import IntegratorConfig, MatrixTrajectory, integrate, integrate_matrix, make_grid
from .sysdef import SystemDef

__all__ = [
    "ExpEnvelope", "PerturbationBudget", "SeriesApprox", "SeriesReport",
    "NotExponentiallyStable",
    "transition_matrix", "fit_envelope", "sup_F_norm", "epsilon_threshold",
    "perturbation_budget", "series_terms", "series_remainder_bound", "series_vs_direct",
    "term_bound",
]


class NotExponentiallyStable(HypothesisError):
    pass


@dataclass(frozen=True)
class ExpEnvelope:
    c: float
    gamma: float
    provenance: Literal["analytic", "fitted"] = "analytic"
    fit: dict | None = field(default=None, compare=False)

    def __call__(self, delta):
        return self.c * np.exp(-self.gamma * np.asarray(delta))


@dataclass(frozen=True)
class PerturbationBudget:
    k: float
    c: float
    gamma: float

    @property
    def eps_star(self) -> float:
        return math.inf if self.k == 0 else self.gamma / (self.k * self.c)

    @property
    def K(self) -> float:
        return self.c + 1.0

    def gamma_eps(self, eps: float) -> float:
        return self.gamma - self.k * self.c * eps

    def admits(self, eps: float) -> bool:
        return 0 <= eps < self.eps_star


def transition_matrix(sys: SystemDef, eps: float, t0: float, tf: float,
                      cfg: IntegratorConfig | None = None, t_eval=None) -> MatrixTrajectory:
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return integrate_matrix(sys.A_eps(eps), t0, tf, cfg, t_eval=t_eval, eps=eps)


def fit_envelope(sys: SystemDef, t0_grid=(0.0, 1.0, 5.0, 10.0), horizon: float = 10.0,
                 cfg: IntegratorConfig | None = None, use_metadata: bool = True) -> ExpEnvelope:
    """Envelope (c, gamma) of the nominal transition matrix.

    Metadata wins when present. Otherwise gamma is the least-squares slope of
    ``-log ||R_0(t, t0)||`` against ``t - t0`` over all sampled pairs, and c is
    raised until the envelope covers every sample.
    """
    if use_metadata and sys.meta.c is not None:
        return ExpEnvelope(sys.meta.c, sys.meta.gamma, "analytic")
    cfg = cfg or IntegratorConfig(grid_dt=horizon / 200)
    deltas, norms = [], []
    for t0 in t0_grid:
        R = integrate_matrix(sys.A_eps(0.0), t0, t0 + horizon, cfg)
        if R.escape_time is not None:
            raise NotExponentiallyStable(f"nominal system escapes at t={R.escape_time:.6g}")
        deltas.append(R.times - t0)
        norms.append(R.norms)
    d = np.concatenate(deltas)
    nr = np.concatenate(norms)
    keep = nr > 0
    if keep.sum() < 2:
        raise NotExponentiallyStable("transition matrix vanishes; cannot fit a decay rate")
    slope, intercept = np.polyfit(d[keep], -np.log(nr[keep]), 1)
    gamma = float(slope)
    if not gamma > 0:
        raise NotExponentiallyStable(
            f"fitted decay rate {gamma:.6g} <= 0: nominal system is not numerically "
            "exponentially stable")
    c = float(np.max(nr * np.exp(gamma * d)))
    residuals = -np.log(nr[keep]) - (slope * d[keep] + intercept)
    fit = {"t0_grid": list(map(float, t0_grid)), "horizon": float(horizon),
           "samples": int(d.size), "max_abs_residual": float(np.max(np.abs(residuals)))}
    return ExpEnvelope(c, gamma, "fitted", fit)


def sup_F_norm(sys: SystemDef, T_sup: float = 1e3, n_coarse: int = 4001,
               use_metadata: bool = True) -> float:
    """Approximate ``sup_t ||F(t)||`` on [0, T_sup].

    Coarse grid (dense near 0, geometric further out) followed by a
    golden-section refinement around the best cell. For time-varying F this
    is a lower estimate of the true supremum over t >= 0; metadata ``k`` is the
    certified path.
    """
    if use_metadata and sys.meta.k is not None:
        return sys.meta.k
    if sys.F_is_constant:
        return matrix_norm(sys.F_at(0.0))
    lin = np.linspace(0.0, min(T_sup, 10.0), n_coarse // 2)
    geo = np.geomspace(min(T_sup, 10.0), T_sup, n_coarse - lin.size) if T_sup > 10 else []
    grid = np.unique(np.concatenate([lin, geo]))
    vals = np.array([matrix_norm(sys.F_at(t)) for t in grid])
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    g = lambda t: matrix_norm(sys.F_at(t))
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1, x2 = hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo)
    g1, g2 = g(x1), g(x2)
    for _ in range(80):
        if hi - lo <= 1e-12 * max(1.0, abs(hi)):
            break
        if g1 >= g2:
            hi, x2, g2 = x2, x1, g1
            x1 = hi - inv_phi * (hi - lo)
            g1 = g(x1)
        else:
            lo, x1, g1 = x1, x2, g2
            x2 = lo + inv_phi * (hi - lo)
            g2 = g(x2)
    return max(best, g1, g2)


def epsilon_threshold(env: ExpEnvelope, k: float) -> float:
    """``gamma / (k c)``; ``inf`` when F vanishes."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return math.inf if k == 0 else env.gamma / (k * env.c)


def perturbation_budget(env: ExpEnvelope, k: float) -> PerturbationBudget:
    return PerturbationBudget(k=float(k), c=env.c, gamma=env.gamma)


def term_bound(env: ExpEnvelope, k: float, i: int, delta) -> np.ndarray:
    """``(k c)^i exp(-gamma D) D^i / i!`` evaluated in log space."""
    delta = np.asarray(delta, dtype=float)
    kc = k * env.c
    if i == 0:
        return env.c * np.exp(-env.gamma * delta)
    with np.errstate(divide="ignore"):
        log = i * np.log(kc * delta) - env.gamma * delta - math.lgamma(i + 1)
    return np.exp(log)


def series_remainder_bound(env: ExpEnvelope, k: float, eps: float, m: int,
                           t: float, t0: float = 0.0) -> float:
    """``exp(-gamma D) * sum_{i > m} (k c eps D)^i / i!``.

    Summed from the first omitted term upwards until a term drops below
    1e-18 of the partial sum, so no cancellation against ``exp``.
    """
    if eps < 0 or m < 0:
        raise ValueError("need eps >= 0 and m >= 0")
    delta = t - t0
    x = k * env.c * eps * delta
    if x <= 0:
        return 0.0
    i = m + 1
    term = math.exp(i * math.log(x) - math.lgamma(i + 1) - env.gamma * delta)
    total = 0.0
    while True:
        total += term
        i += 1
        term *= x / i
        if term < 1e-18 * total and i > x:
            break
    return total


@dataclass
class SeriesApprox:
    """Terms Y_1..Y_m on a grid, with R_0 from the same integration."""

    t0: float
    times: np.ndarray
    R0: np.ndarray  # (len(times), n, n)
    Y: np.ndarray   # (m, len(times), n, n); Y[i-1] is Y_i
    env: ExpEnvelope | None = None
    k: float | None = None

    @property
    def order(self) -> int:
        return self.Y.shape[0]

    def term(self, i: int) -> MatrixTrajectory:
        return MatrixTrajectory(t0=self.t0, eps=0.0, times=self.times, states=self.Y[i - 1])

    def partial_sum(self, eps: float, m: int | None = None) -> np.ndarray:
        m = self.order if m is None else m
        out = self.R0.copy()
        for i in range(1, m + 1):
            out += eps ** i * self.Y[i - 1]
        return out

    def remainder_bound(self, eps: float, t: float, m: int | None = None) -> float:
        if self.env is None or self.k is None:
            raise ValueError("remainder bound needs an envelope and k")
        return series_remainder_bound(self.env, self.k, eps, self.order if m is None else m, t, self.t0)


def series_terms(sys: SystemDef, t0: float, tf: float, m: int,
                 cfg: IntegratorConfig | None = None, t_eval=None,
                 env: ExpEnvelope | None = None, k: float | None = None,
                 start_offset: float = 1e-12) -> SeriesApprox:
    """Compute Y_1..Y_m by integrating the triangular hierarchy for the Y_i.

    Each term is carried in the scaled form ``U_i = i! Y_i / D^i`` against the
    logarithmic time ``tau = log D``::

        dR_0/dtau = D A0 R_0
        dU_i/dtau = D A0 U_i + i (F U_(i-1) - U_i),    U_0 = R_0

    ``U_i(t0) = F(t0)^i`` is finite, so the error control stays relative to
    the size of each term even where ``Y_i ~ D^i`` is many orders of
    magnitude below the integrator's absolute tolerance. Integration starts
    at ``D = start_offset`` (an O(start_offset) relative perturbation).
    """
    if m < 1:
        raise ValueError("order m must be >= 1")
    cfg = cfg or IntegratorConfig()
    times = make_grid(t0, tf, cfg.grid_dt) if t_eval is None else np.asarray(t_eval, dtype=float)
    n = sys.n
    A0, F = sys.A0_at, sys.F_at

    R0_out = np.empty((times.size, n, n))
    Y_out = np.zeros((m, times.size, n, n))
    R0_out[0] = np.eye(n)
    pos = times > t0
    if not pos.any():
        return SeriesApprox(t0, times, R0_out, Y_out, env, k)

    Ft0 = F(t0)
    y0 = [np.eye(n)]
    for _ in range(m):
        y0.append(Ft0 @ y0[-1])
    y0 = np.concatenate([b.ravel() for b in y0])
    idx = np.arange(1, m + 1)[:, None, None]

    def rhs(tau, y, _eps):
        d = math.exp(tau)
        t = t0 + d
        a = A0(t)
        blocks = y.reshape(m + 1, n, n)
        out = np.empty_like(blocks)
        out[0] = d * (a @ blocks[0])
        fu = F(t) @ blocks[:-1]
        out[1:] = d * (a @ blocks[1:]) + idx * (fu - blocks[1:])
        return out.ravel()

    tau_start = math.log(start_offset * max(1.0, abs(t0)))
    taus = np.log(times[pos] - t0)
    if taus[0] <= tau_start:
        raise ValueError("grid point closer to t0 than the series start offset")
    tau_grid = np.concatenate([[tau_start], taus])
    tau_cfg = IntegratorConfig(abs_tol=cfg.abs_tol, rel_tol=cfg.rel_tol,
                               max_step=cfg.max_step, grid_dt=1.0,
                               max_steps=cfg.max_steps, escape_norm=cfg.escape_norm)
    traj = integrate(rhs, y0, tau_start, float(tau_grid[-1]), 0.0, tau_cfg, t_eval=tau_grid)
    if traj.escape_time is not None:
        raise NumericalError(f"series integration failed at t={t0 + math.exp(traj.escape_time):.6g}")
    blocks = traj.states[1:].reshape(-1, m + 1, n, n)
    R0_out[pos] = blocks[:, 0]
    d = times[pos] - t0
    for i in range(1, m + 1):
        scale = np.exp(i * np.log(d) - math.lgamma(i + 1))
        Y_out[i - 1, pos] = blocks[:, i] * scale[:, None, None]
    return SeriesApprox(t0, times, R0_out, Y_out, env, k)


@dataclass
class SeriesReport:
    eps: float
    m: int
    times: np.ndarray
    deviation: np.ndarray
    bound: np.ndarray
    atol: float

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max())

    @property
    def max_excess(self) -> float:
        return float(np.max(self.deviation - self.bound))

    @property
    def ok(self) -> bool:
        return bool(np.all(self.deviation <= self.bound + self.atol))


def series_vs_direct(sys: SystemDef, eps: float, m: int, t0: float, tf: float,
                     env: ExpEnvelope, k: float, cfg: IntegratorConfig | None = None,
                     atol: float = 1e-7, series: SeriesApprox | None = None) -> SeriesReport:
    """Compare the truncated series with a direct integration of R_eps."""
    cfg = cfg or IntegratorConfig()
    if eps >= epsilon_threshold(env, k):
        raise HypothesisError(f"eps={eps} is not below the threshold {epsilon_threshold(env, k):.10g}")
    series = series or series_terms(sys, t0, tf, m, cfg, env=env, k=k)
    direct = transition_matrix(sys, eps, t0, tf, cfg, t_eval=series.times)
    approx = series.partial_sum(eps, m)
    dev = np.array([matrix_norm(a - b) for a, b in zip(direct.states, approx)])
    bound = np.array([series_remainder_bound(env, k, eps, m, t, t0) for t in series.times])
    return SeriesReport(eps, m, series.times, dev, bound, atol)
