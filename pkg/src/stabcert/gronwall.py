"""Gronwall-type integral inequalities.

If ``u(t) <= c + int_a^t (u v + w)`` with ``u, v, w >= 0`` then for every r > 0

    u(t) <= c exp(V(t)) + r exp(V(t) + W(t) / r),

with ``V = int_a^t v`` and ``W = int_a^t w``. The maximal ``u`` solves the
equality ODE ``u' = u v + w, u(a) = c``; ``gronwall_oracle`` integrates it so
that the bound can be tested against the worst admissible function.

The second inequality bounds ``int_t0^t phi`` by ``N + L (t - t0)`` for
``phi`` in L^p, splitting the domain at ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .errors import ValidationError
from .ode import IntegratorConfig, Trajectory, integrate
from .quadrature import NegativeIntegrandError, quad, quad_cells, quad_improper

__all__ = [
    "GronwallInstance", "PiecewiseConstant", "LpBoundResult",
    "gronwall_bound", "gronwall_bound_grid", "gronwall_oracle", "optimize_r",
    "lp_linear_bound", "lp_tail_norm",
]

QUAD_TOL = 1e-10
R_SEARCH = (-6.0, 6.0)  # log10 range for optimize_r


class PiecewiseConstant:
    """Step function: ``values[i]`` on ``[edges[i], edges[i+1])``, last value beyond."""

    def __init__(self, edges: Sequence[float], values: Sequence[float]):
        if len(edges) != len(values) or len(edges) == 0:
            raise ValueError("need one value per left edge")
        self.edges = np.asarray(edges, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must increase strictly")

    def __call__(self, t):
        idx = np.clip(np.searchsorted(self.edges, t, side="right") - 1, 0, len(self.values) - 1)
        out = self.values[idx]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(self.edges[1:].tolist())


def as_time_function(f) -> Callable[[float], float]:
    """Accept a callable of t, a tree or a DSL string in ``t``."""
    if isinstance(f, str):
        f = ex.parse(f, allowed=("t",))
    if isinstance(f, ex.ScalarExpr):
        g = ex.compile_expr(f)
        return lambda t: g(float(t))
    if isinstance(f, (int, float)):
        value = float(f)
        return lambda t: value
    if callable(f):
        return f
    raise TypeError(f"cannot use {f!r} as a function of time")


@dataclass(frozen=True)
class GronwallInstance:
    c: float
    v: object
    w: object
    r: float = 1.0
    a: float = 0.0
    breakpoints: tuple[float, ...] = ()
    _v: Callable = field(init=False, repr=False, compare=False)
    _w: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.c >= 0:
            raise ValidationError(f"c must be nonnegative, got {self.c}")
        if not self.r > 0:
            raise ValidationError(f"r must be positive, got {self.r}")
        object.__setattr__(self, "_v", as_time_function(self.v))
        object.__setattr__(self, "_w", as_time_function(self.w))
        bps = set(self.breakpoints)
        for f in (self.v, self.w):
            bps.update(getattr(f, "breakpoints", ()))
        object.__setattr__(self, "breakpoints", tuple(sorted(bps)))

    def with_r(self, r: float) -> "GronwallInstance":
        return GronwallInstance(self.c, self.v, self.w, r, self.a, self.breakpoints)

    def integrals(self, t0: float, t1: float) -> tuple[float, float]:
        """(int v, int w) over [t0, t1]; negative samples are errors."""
        pts = [p for p in self.breakpoints if t0 < p < t1]
        try:
            V = quad(self._v, t0, t1, QUAD_TOL, points=pts, nonnegative=True)
            W = quad(self._w, t0, t1, QUAD_TOL, points=pts, nonnegative=True)
        except NegativeIntegrandError as exc:
            raise ValidationError(f"v and w must be nonnegative: {exc}") from exc
        return V, W


def _log_bound(c: float, r: float, V: float, W: float) -> float:
    log_first = math.log(c) + V if c > 0 else -math.inf
    log_second = math.log(r) + V + W / r
    return float(np.logaddexp(log_first, log_second))


def _bound_from_integrals(c, r, V, W) -> float:
    lb = _log_bound(c, r, V, W)
    return math.inf if lb > 709.0 else math.exp(lb)


def gronwall_bound(inst: GronwallInstance, t: float) -> float:
    """``c e^V + r e^(V + W/r)`` at time ``t``."""
    if t < inst.a:
        raise ValidationError(f"t={t} precedes the start time a={inst.a}")
    V, W = inst.integrals(inst.a, t)
    return _bound_from_integrals(inst.c, inst.r, V, W)


def gronwall_bound_grid(inst: GronwallInstance, times) -> np.ndarray:
    """The bound on an increasing grid, accumulating the integrals cell by cell."""
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.zeros(0)
    if times[0] < inst.a or np.any(np.diff(times) <= 0):
        raise ValidationError("grid must increase strictly from a")
    edges = np.union1d(np.concatenate([[inst.a], times]),
                       [p for p in inst.breakpoints if inst.a < p < times[-1]])
    cum = []
    for f, raw in ((inst._v, inst.v), (inst._w, inst.w)):
        try:
            cells = quad_cells(f, edges, QUAD_TOL, vectorized=isinstance(raw, PiecewiseConstant),
                               nonnegative=True)
        except NegativeIntegrandError as exc:
            raise ValidationError(f"v and w must be nonnegative: {exc}") from exc
        cum.append(np.concatenate([[0.0], np.cumsum(cells)])[np.searchsorted(edges, times)])
    return np.array([_bound_from_integrals(inst.c, inst.r, V, W) for V, W in zip(*cum)])


def gronwall_oracle(inst: GronwallInstance, t0: float | None = None, tf: float = 1.0,
                    cfg: IntegratorConfig | None = None, t_eval=None) -> Trajectory:
    """Solve ``u' = u v + w, u(a) = c``: the largest function obeying the inequality."""
    t0 = inst.a if t0 is None else t0
    if t0 != inst.a:
        raise ValidationError("the oracle starts at the instance's a")
    v, w = inst._v, inst._w

    def f(t, u, _eps):
        return np.array([u[0] * v(t) + w(t)])

    return integrate(f, [inst.c], t0, tf, 0.0, cfg, t_eval=t_eval, tstops=inst.breakpoints)


def optimize_r(inst: GronwallInstance, t: float, tol: float = 1e-10) -> tuple[float, float]:
    """Golden-section search for the r minimizing the bound at ``t``.

    Searches ``log10 r`` over [-6, 6]; returns ``(r_opt, bound)``.
    """
    if not t > inst.a:
        raise ValidationError("horizon must exceed a")
    V, W = inst.integrals(inst.a, t)

    def g(logr):
        return _log_bound(inst.c, 10.0 ** logr, V, W)

    lo, hi = R_SEARCH
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    g1, g2 = g(x1), g(x2)
    while hi - lo > tol:
        if g1 <= g2:
            hi, x2, g2 = x2, x1, g1
            x1 = hi - inv_phi * (hi - lo)
            g1 = g(x1)
        else:
            lo, x1, g1 = x1, x2, g2
            x2 = lo + inv_phi * (hi - lo)
            g2 = g(x2)
    best = min((g(lo), lo), (g(hi), hi), (g1, x1), (g2, x2))
    r_opt = 10.0 ** best[1]
    return r_opt, _bound_from_integrals(inst.c, r_opt, V, W)


# ---------------------------------------------------------------------------
# L^p linear-growth bound

@dataclass(frozen=True)
class LpBoundResult:
    p: float
    s: float
    M_s: float
    phi_head: float  # int_0^s phi
    N: float
    L: float
    tail_cutoff: float

    def value(self, t0: float, t: float) -> float:
        return self.N + self.L * (t - t0)


def lp_tail_norm(phi, p: float, s: float, tail_tol: float = 1e-14,
                 vectorized: bool = False) -> tuple[float, float]:
    """Upper estimate of ``(int_s^inf phi^p)^(1/p)`` and the cut-off used."""
    f = phi if vectorized else as_time_function(phi)
    if p == 1:
        g = f
    elif vectorized:
        g = lambda t: np.asarray(f(t), dtype=float) ** p
    else:
        g = lambda t: f(t) ** p
    try:
        integral, T = quad_improper(g, s, tail_tol, vectorized=vectorized)
    except NegativeIntegrandError as exc:
        raise ValidationError(f"phi must be nonnegative: {exc}") from exc
    return integral ** (1.0 / p), T


def lp_linear_bound(phi, p: float, s: float, t0: float = 0.0, t: float | None = None,
                    *, tail_tol: float = 1e-14, vectorized: bool = False):
    """Constants of the linear-growth bound ``int_t0^t phi <= N + L (t - t0)``.

    ``N = int_0^s phi + M_s / p`` and ``L = (p - 1) / p * M_s`` with
    ``M_s = ||phi restricted to [s, inf)||_p``. Returns the result record, or
    ``(record, bound)`` when ``t`` is given.
    """
    if not p >= 1:
        raise ValidationError(f"p must be >= 1, got {p}")
    if s < 0:
        raise ValidationError(f"s must be nonnegative, got {s}")
    M_s, T = lp_tail_norm(phi, p, s, tail_tol, vectorized)
    f = phi if vectorized else as_time_function(phi)
    try:
        head = quad(f, 0.0, s, QUAD_TOL * 1e-2, vectorized=vectorized, nonnegative=True) if s > 0 else 0.0
    except NegativeIntegrandError as exc:
        raise ValidationError(f"phi must be nonnegative: {exc}") from exc
    res = LpBoundResult(p=float(p), s=float(s), M_s=M_s, phi_head=head,
                        N=head + M_s / p, L=(p - 1.0) / p * M_s, tail_cutoff=T)
    if t is None:
        return res
    if t < t0 or t0 < 0:
        raise ValidationError("need t >= t0 >= 0")
    return res, res.value(t0, t)
