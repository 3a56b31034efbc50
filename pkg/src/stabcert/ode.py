"""Dormand-Prince 5(4) integration of vector and matrix ODEs.

Steps are controlled by a PI controller on the embedded error estimate and
the solution is sampled on a user grid through the pair's fourth-order
continuous extension. Finite-time escape is returned as data
(``Trajectory.escape_time``) so that unstable parameter values can still be
reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import DomainError
from .linalg import matrix_norm

__all__ = [
    "IntegratorConfig", "Trajectory", "MatrixTrajectory",
    "integrate", "integrate_matrix", "make_grid",
]


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    max_step: float = math.inf
    grid_dt: float = 0.01
    max_steps: int = 2_000_000
    # state norm beyond which a trajectory counts as escaped
    escape_norm: float = 1e100

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("tolerances must be positive")
        if not self.max_step > 0 or not self.grid_dt > 0:
            raise ValueError("max_step and grid_dt must be positive")

    def as_dict(self) -> dict:
        return {"abs_tol": self.abs_tol, "rel_tol": self.rel_tol,
                "max_step": None if math.isinf(self.max_step) else self.max_step,
                "grid_dt": self.grid_dt}


@dataclass
class Trajectory:
    t0: float
    eps: float
    times: np.ndarray
    states: np.ndarray  # (len(times), n)
    steps_accepted: int = 0
    steps_rejected: int = 0
    escape_time: float | None = None

    @property
    def escaped(self) -> bool:
        return self.escape_time is not None

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.states, self.states))

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass
class MatrixTrajectory:
    t0: float
    eps: float
    times: np.ndarray
    states: np.ndarray  # (len(times), n, n)
    steps_accepted: int = 0
    steps_rejected: int = 0
    escape_time: float | None = None
    _norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def norms(self) -> np.ndarray:
        if self._norms is None:
            self._norms = np.array([matrix_norm(m) for m in self.states])
        return self._norms

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def make_grid(t0: float, tf: float, dt: float) -> np.ndarray:
    """Uniform grid from ``t0`` to ``tf`` inclusive with spacing close to ``dt``."""
    if tf <= t0:
        return np.array([float(t0)])
    n = max(1, int(math.ceil((tf - t0) / dt - 1e-9)))
    grid = t0 + (tf - t0) * (np.arange(n + 1) / n)
    grid[-1] = tf
    return grid


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = _A[6]
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
# continuous extension: y(t + s h) = y + h * K^T @ (_P @ [s, s^2, s^3, s^4])
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

_SAFETY = 0.9
_ALPHA = 0.17   # PI controller exponents (Hairer & Wanner)
_BETA = 0.04
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0


def _err_norm(err, y, y_new, cfg: IntegratorConfig) -> float:
    # max norm: every component meets its own tolerance, which matters for
    # matrix states whose entries differ by orders of magnitude
    r = err / (cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_new)))
    return float(np.max(np.abs(r)))


def _initial_step(fun, t0, y0, f0, direction_span, cfg) -> float:
    sc = cfg.abs_tol + cfg.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, direction_span, cfg.max_step)
    y1 = y0 + h0 * f0
    f1 = fun(t0 + h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, direction_span, cfg.max_step)


def _solve(fun: Callable[[float, np.ndarray], np.ndarray], t0: float, y0: np.ndarray,
           tf: float, grid: np.ndarray, cfg: IntegratorConfig,
           tstops: Sequence[float] = ()):
    """Core DP5 loop; returns (samples, accepted, rejected, escape_time)."""
    y = np.array(y0, dtype=float)
    n = y.size
    out = np.empty((len(grid), n))
    out[0] = y
    gi = 1
    while gi < len(grid) and grid[gi] <= t0:
        out[gi] = y
        gi += 1
    stops = sorted(s for s in tstops if t0 < s < tf) + [tf]
    si = 0
    t = float(t0)
    K = np.empty((7, n))
    K[0] = fun(t, y)
    h = _initial_step(fun, t, y, K[0], stops[0] - t, cfg)
    err_prev = 1e-4
    accepted = rejected = 0
    escape = None
    min_step_rel = 16 * np.finfo(float).eps
    reject_streak = False

    while t < tf and escape is None:
        target = stops[si]
        h = min(h, cfg.max_step)
        if t + h >= target or target - (t + h) < min_step_rel * abs(target):
            h = target - t
            landing = True
        else:
            landing = False
        if h <= min_step_rel * max(abs(t), 1.0):
            escape = t
            break
        # stages that fall on a stop see the left limit of the right-hand side
        t_end = np.nextafter(target, t) if landing else t + h
        try:
            for s in range(1, 7):
                K[s] = fun(min(t + _C[s] * h, t_end), y + h * (_A[s] @ K[:s]))
            y_new = y + h * (_B @ K[:6])
            K_last = fun(t_end, y_new)
        except DomainError as exc:
            if exc.kind != "overflow":
                raise
            h *= 0.25
            rejected += 1
            reject_streak = True
            continue
        K[6] = K_last
        if not np.all(np.isfinite(K_last)) or not np.all(np.isfinite(y_new)):
            h *= 0.25
            rejected += 1
            reject_streak = True
            continue
        err = _err_norm(h * (_E @ K), y, y_new, cfg)
        if err <= 1.0:
            t_new = target if landing else t + h
            # dense output onto the grid
            if gi < len(grid) and grid[gi] <= t_new:
                Q = K.T @ _P
                while gi < len(grid) and grid[gi] <= t_new:
                    if grid[gi] == t_new:
                        out[gi] = y_new
                    else:
                        s = (grid[gi] - t) / h
                        out[gi] = y + h * (Q @ np.array([s, s * s, s ** 3, s ** 4]))
                    gi += 1
            t, y = t_new, y_new
            accepted += 1
            if math.sqrt(float(y @ y)) > cfg.escape_norm:
                escape = t
                break
            if err == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * err ** -_ALPHA * err_prev ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
            if reject_streak:
                factor = min(1.0, factor)
            reject_streak = False
            err_prev = max(err, 1e-4)
            h *= factor
            if landing and t >= target:
                si += 1
                if si < len(stops):
                    # right-hand side may jump at a stop: restart the stage cache
                    K[0] = fun(t, y)
            else:
                K[0] = K_last
            if accepted + rejected > cfg.max_steps:
                escape = t
                break
        else:
            rejected += 1
            reject_streak = True
            h *= max(_MIN_FACTOR, _SAFETY * err ** -0.2)
    return out[:gi], accepted, rejected, escape


def integrate(rhs: Callable, x0, t0: float, tf: float, eps: float = 0.0,
              cfg: IntegratorConfig | None = None, *, t_eval=None,
              tstops: Sequence[float] = ()) -> Trajectory:
    """Integrate ``x' = rhs(t, x, eps)`` from ``t0`` to ``tf``.

    The result is sampled on ``t_eval`` when given, otherwise on a uniform grid
    of spacing ``cfg.grid_dt``. ``tstops`` are times where ``rhs`` may be
    discontinuous; the integrator lands on them and restarts.
    """
    cfg = cfg or IntegratorConfig()
    x0 = np.array(x0, dtype=float).ravel()
    if not tf > t0:
        raise ValueError(f"need tf > t0, got t0={t0}, tf={tf}")
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial condition must be finite")
    grid = make_grid(t0, tf, cfg.grid_dt) if t_eval is None else np.asarray(t_eval, dtype=float)
    if grid[0] != t0 or np.any(np.diff(grid) <= 0) or grid[-1] > tf:
        raise ValueError("t_eval must start at t0, increase strictly and end by tf")

    def fun(t, y):
        return np.asarray(rhs(t, y, eps), dtype=float)

    states, acc, rej, escape = _solve(fun, float(t0), x0, float(tf), grid, cfg, tstops)
    states[0] = x0
    return Trajectory(t0=float(t0), eps=float(eps), times=grid[:len(states)].copy(),
                      states=states, steps_accepted=acc, steps_rejected=rej,
                      escape_time=escape)


def integrate_matrix(A: Callable[[float], np.ndarray], t0: float, tf: float,
                     cfg: IntegratorConfig | None = None, *, R0=None, t_eval=None,
                     eps: float = 0.0) -> MatrixTrajectory:
    """Integrate ``R' = A(t) R`` with ``R(t0) = R0`` (identity by default)."""
    cfg = cfg or IntegratorConfig()
    n = np.asarray(A(t0)).shape[0]
    R0 = np.eye(n) if R0 is None else np.asarray(R0, dtype=float)
    grid = make_grid(t0, tf, cfg.grid_dt) if t_eval is None else np.asarray(t_eval, dtype=float)
    if tf == t0:
        return MatrixTrajectory(t0=float(t0), eps=eps, times=np.array([float(t0)]),
                                states=R0[None].copy())

    def rhs(t, y, _eps):
        return (np.asarray(A(t), dtype=float) @ y.reshape(n, n)).ravel()

    traj = integrate(rhs, R0.ravel(), t0, tf, eps, cfg, t_eval=grid)
    return MatrixTrajectory(t0=traj.t0, eps=float(eps), times=traj.times,
                            states=traj.states.reshape(-1, n, n),
                            steps_accepted=traj.steps_accepted,
                            steps_rejected=traj.steps_rejected,
                            escape_time=traj.escape_time)
