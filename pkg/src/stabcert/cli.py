"""Command-line front end: ``stabcert <command> ...``.

Exit codes: 0 success, 1 certificate check failed, 2 invalid input,
3 integrator escape, 4 a stability hypothesis is not met.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import expr as ex
from . import report
from .errors import HypothesisError, NumericalError, StabcertError, ValidationError
from .gronwall import GronwallInstance, gronwall_bound, gronwall_oracle, optimize_r
from .ode import IntegratorConfig
from .stability import CERTIFY_CONFIG, ConstantsError, certify_system, observe
from .sysdef import SystemDef, dumps, load, loads
from .transition import ExpEnvelope, fit_envelope, perturbation_budget, sup_F_norm

EXIT_OK, EXIT_FAIL, EXIT_INVALID, EXIT_ESCAPE, EXIT_HYPOTHESIS = 0, 1, 2, 3, 4
GROWTH_RATE = 1e-4


class _Manifest:
    def __init__(self, command: str, out: Path):
        self.t_start = time.perf_counter()
        self.out = out
        self.doc = {"command": command, "version": __version__, "outputs": [],
                    "seeds": [], "eps": []}

    def add(self, path: Path) -> Path:
        self.doc["outputs"].append(str(path))
        return path

    def write(self, **fields) -> Path:
        self.doc.update(fields)
        self.doc["wall_clock_s"] = time.perf_counter() - self.t_start
        path = self.out / f"{self.doc['command']}.manifest.json"
        self.doc["outputs"].append(str(path))
        report.write_json(path, self.doc)
        return path


def _cfg(args) -> IntegratorConfig:
    try:
        return IntegratorConfig(abs_tol=args.abs_tol, rel_tol=args.rel_tol, grid_dt=args.dt)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tag(eps: float) -> str:
    return ("%.6g" % eps).replace("-", "m")


def _parse_K(text: str | None):
    if text is None or text == "theorem":
        return text
    try:
        K = float(text)
    except ValueError:
        raise ValidationError(f"--K must be 'theorem' or a positive number, got {text!r}")
    if not K > 0:
        raise ValidationError("--K must be positive")
    return K


def _resolve_r(text: str, eps: float):
    """``auto``, a number, or an expression in ``eps`` such as ``1/(1-eps)``."""
    if text == "auto":
        return "auto"
    try:
        node = ex.parse(text, allowed=("eps",))
        return ex.evaluate(node, {"eps": eps})
    except ex.DomainError as exc:
        raise ValidationError(f"--r {text!r} undefined at eps={eps:g}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    sysd = load(args.system)
    out = _out_dir(args)
    man = _Manifest("simulate", out)
    cfg = _cfg(args)
    obs = observe(sysd, args.eps, args.t0, args.tf, cfg)
    traj = obs.trajectory
    path = man.add(out / f"trajectory_{sysd.name}_eps{_tag(args.eps)}.csv")
    header, rows = report.trajectory_rows(traj)
    report.write_csv(path, header, rows)
    man.write(system=sysd.name, eps=[args.eps], tolerances=cfg.as_dict(),
              growth=obs.growing, growth_rate=obs.growth_rate,
              escape_time=traj.escape_time, final_norm=obs.final_norm)
    print(f"{sysd.name} eps={args.eps:g}: final norm {obs.final_norm:.10g}, "
          f"growth rate {obs.growth_rate:.6g} -> {path}")
    if traj.escape_time is not None:
        print(f"integrator escape at t={traj.escape_time:.10g}", file=sys.stderr)
        return EXIT_ESCAPE
    return EXIT_OK


def threshold_report(sysd: SystemDef, T_sup: float = 1e3) -> dict:
    env = fit_envelope(sysd)
    k = sup_F_norm(sysd, T_sup)
    b = perturbation_budget(env, k)
    return {
        "system": sysd.name,
        "c": env.c,
        "gamma": env.gamma,
        "envelope_provenance": env.provenance,
        "k": k,
        "k_provenance": "analytic" if sysd.meta.k is not None else
                        ("exact" if sysd.F_is_constant else f"grid sup on [0, {T_sup:g}]"),
        "K": b.K,
        "eps_star": b.eps_star,
        "eps_star_unbounded": math.isinf(b.eps_star),
        # the cruder gamma/c value, shown for comparison only
        "gamma_over_c": env.gamma / env.c,
    }


def cmd_threshold(args) -> int:
    sysd = load(args.system)
    doc = threshold_report(sysd, args.T_sup)
    text = report.dumps_json(doc)
    if args.out:
        out = _out_dir(args)
        man = _Manifest("threshold", out)
        report.write_json(man.add(out / f"threshold_{sysd.name}.json"), doc)
        man.write(system=sysd.name)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_certify(args) -> int:
    sysd = load(args.system)
    out = _out_dir(args)
    man = _Manifest("certify", out)
    cfg = _cfg(args)
    K = _parse_K(args.K)
    r = _resolve_r(args.r, args.eps)
    try:
        cert = certify_system(sysd, args.eps, p=args.p, r=r, K=K, t0=args.t0, tf=args.tf,
                              cfg=cfg, T_sup=args.T_sup)
    except HypothesisError as exc:
        print(f"no certificate: {exc}", file=sys.stderr)
        if args.observe:
            obs = observe(sysd, args.eps, args.t0, args.tf, cfg)
            path = man.add(out / f"trajectory_{sysd.name}_eps{_tag(args.eps)}.csv")
            header, rows = report.trajectory_rows(obs.trajectory)
            report.write_csv(path, header, rows)
            print(f"observed growth rate {obs.growth_rate:.6g} "
                  f"({'growth' if obs.growing else 'no growth detected'})")
        man.write(system=sysd.name, eps=[args.eps], error=str(exc))
        return EXIT_HYPOTHESIS
    stem = f"certificate_{sysd.name}_eps{_tag(args.eps)}"
    report.write_json(man.add(out / f"{stem}.json"), cert.report())
    report.write_csv(man.add(out / f"{stem}.csv"), ["t", "norm", "envelope", "ratio"],
                     zip(cert.times, cert.norms, cert.envelope, cert.ratios))
    man.write(system=sysd.name, eps=[args.eps], tolerances={"ratio": cert.tol, **cfg.as_dict()})
    tc = cert.constants
    print(f"{sysd.name} eps={args.eps:g}: {'PASS' if cert.passed else 'FAIL'} "
          f"max ratio {cert.max_ratio:.6g}; L={tc.L:.10g} N={tc.N:.10g} "
          f"delta={tc.delta:.10g} theta={tc.theta:.10g} (K={tc.K:g}, {tc.K_mode})")
    if cert.escape_time is not None:
        return EXIT_ESCAPE
    return EXIT_OK if cert.passed else EXIT_FAIL


def _sweep_point(source: str, eps: float, opts: dict, env: ExpEnvelope, k: float) -> list:
    """One row of the sweep table: ``eps, gamma_eps, status, final_norm, ball_radius``."""
    sysd = loads(source)
    cfg = opts["cfg"]
    gamma_eps = env.gamma - k * env.c * eps
    r = _resolve_r(opts["r"], eps)
    try:
        cert = certify_system(sysd, eps, p=opts["p"], r=r, K=opts["K"], tf=opts["tf"],
                              cfg=cfg, T_sup=opts["T_sup"], env=env, k=k)
    except ConstantsError as exc:
        obs = observe(sysd, eps, 0.0, opts["tf"], cfg)
        status = "growth" if obs.growing else "uncertified"
        # an inadmissible r still has a nominal radius r L / K worth reporting
        return [eps, gamma_eps, status, obs.final_norm, exc.partial.get("N")]
    except HypothesisError:
        obs = observe(sysd, eps, 0.0, opts["tf"], cfg)
        return [eps, gamma_eps, "growth" if obs.growing else "uncertified",
                obs.final_norm, None]
    status = "pass" if cert.passed else "fail"
    return [eps, gamma_eps, status, float(cert.norms[-1]), cert.ball_radius]


def sweep_eps(eps_min: float, eps_max: float, steps: int) -> list[float]:
    if steps < 1:
        raise ValidationError("--steps must be >= 1")
    if steps == 1:
        return [eps_min]
    return [round(eps_min + i * (eps_max - eps_min) / (steps - 1), 12) for i in range(steps)]


def cmd_sweep(args) -> int:
    sysd = load(args.system)
    out = _out_dir(args)
    man = _Manifest("sweep", out)
    if args.eps is not None:
        eps_values = [float(e) for e in args.eps.split(",")]
    else:
        eps_values = sweep_eps(args.eps_min, args.eps_max, args.steps)
    if any(e < 0 for e in eps_values):
        raise ValidationError("eps must be nonnegative")
    K = _parse_K(args.K)
    _resolve_r(args.r, eps_values[0])  # validate once up front
    env = fit_envelope(sysd)
    k = sup_F_norm(sysd, args.T_sup)
    cfg = _cfg(args)
    opts = {"p": args.p, "r": args.r, "K": K, "tf": args.tf, "T_sup": args.T_sup, "cfg": cfg}
    source = dumps(sysd)
    jobs = args.jobs or int(os.environ.get("STABCERT_JOBS", "1") or 1)
    if jobs > 1 and len(eps_values) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(eps_values))) as pool:
            futures = [pool.submit(_sweep_point, source, e, opts, env, k) for e in eps_values]
            rows = [f.result() for f in futures]  # collected in eps order
    else:
        rows = [_sweep_point(source, e, opts, env, k) for e in eps_values]
    path = man.add(out / f"sweep_{sysd.name}.csv")
    report.write_csv(path, ["eps", "gamma_eps", "pass", "final_norm", "ball_radius"], rows)
    man.write(system=sysd.name, eps=eps_values, jobs=jobs,
              tolerances={"ratio": 1e-6, "growth_rate": GROWTH_RATE, **cfg.as_dict()},
              growth=any(row[2] == "growth" for row in rows))
    for row in rows:
        print(f"eps={row[0]:<8g} {row[2]:<12} final norm {row[3]:.6g}")
    return EXIT_FAIL if any(row[2] == "fail" for row in rows) else EXIT_OK


def cmd_gronwall(args) -> int:
    inst = GronwallInstance(args.c, args.v, args.w, 1.0 if args.r == "auto" else float(args.r),
                            args.a)
    if not args.t > args.a:
        raise ValidationError("--t must exceed --a")
    if args.r == "auto":
        r_opt, bound = optimize_r(inst, args.t)
        inst = inst.with_r(r_opt)
    else:
        bound = gronwall_bound(inst, args.t)
    traj = gronwall_oracle(inst, tf=args.t, t_eval=np.array([args.a, args.t]))
    oracle = float(traj.states[-1, 0])
    V, W = inst.integrals(inst.a, args.t)
    doc = {"c": inst.c, "v": args.v, "w": args.w, "a": inst.a, "t": args.t, "r": inst.r,
           "r_mode": args.r if args.r == "auto" else "given", "V": V, "W": W,
           "bound": bound, "oracle": oracle, "slack": bound - oracle}
    if args.out:
        out = _out_dir(args)
        man = _Manifest("gronwall", out)
        report.write_json(man.add(out / "gronwall.json"), doc)
        man.write()
    sys.stdout.write(report.dumps_json(doc))
    return EXIT_OK


PLOT_HEADER = ["source", "t", "series", "value"]


def plotdata_rows(paths) -> list[list[str]]:
    """Long format ``source,t,series,value`` from CSV files whose first column is ``t``."""
    rows = []
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            if not header or header[0] != "t":
                raise ValidationError(f"{p}: first column must be 't'")
            for rec in reader:
                for name, value in zip(header[1:], rec[1:]):
                    rows.append([Path(p).stem, rec[0], name, value])
    return rows


def cmd_plotdata(args) -> int:
    text = report.csv_text(PLOT_HEADER, plotdata_rows(args.inputs))
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stabcert",
        description="Exponential and practical stability certificates for "
                    "x' = A0(t)x + eps F(t)x + h(t,x,eps)")
    parser.add_argument("--version", action="version", version=f"stabcert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, tf=30.0, tight=False):
        p.add_argument("--system", required=True,
                       help="built-in name (example1, example2), JSON file or inline JSON")
        p.add_argument("--tf", type=float, default=tf)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--T-sup", dest="T_sup", type=float, default=1e3,
                       help="horizon for numerical sup over t (default 1000)")
        # envelope checks compare relative quantities, so they default to
        # purely relative error control
        p.add_argument("--abs-tol", type=float,
                       default=CERTIFY_CONFIG.abs_tol if tight else 1e-10)
        p.add_argument("--rel-tol", type=float,
                       default=CERTIFY_CONFIG.rel_tol if tight else 1e-8)
        p.add_argument("--dt", type=float, default=0.01, help="output grid spacing")

    p = sub.add_parser("simulate", help="integrate one trajectory")
    common(p, tf=10.0)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--t0", type=float, default=0.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("threshold", help="perturbation budget eps* = gamma/(k c)")
    p.add_argument("--system", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--T-sup", dest="T_sup", type=float, default=1e3)
    p.set_defaults(func=cmd_threshold)

    def theorem_opts(p):
        p.add_argument("--p", type=float, default=1.0, help="Lebesgue exponent of phi")
        p.add_argument("--r", default="auto",
                       help="ball parameter: 'auto' (2 r_min), a number or an expression in eps")
        p.add_argument("--K", default=None,
                       help="'theorem' (c+1) or a number; default uses system metadata if any")

    p = sub.add_parser("certify", help="constants and envelope check for one eps")
    common(p, tight=True)
    theorem_opts(p)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--observe", action="store_true",
                   help="when no certificate exists, still integrate and report growth")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("sweep", help="certify over a range of eps")
    common(p, tf=10.0, tight=True)
    theorem_opts(p)
    p.add_argument("--eps-min", type=float, default=0.0)
    p.add_argument("--eps-max", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--eps", default=None, help="comma-separated eps list (overrides the range)")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default $STABCERT_JOBS or 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gronwall", help="evaluate the integral-inequality bound")
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--v", required=True, help="expression in t")
    p.add_argument("--w", required=True, help="expression in t")
    p.add_argument("--r", default="auto")
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gronwall)

    p = sub.add_parser("plotdata", help="merge CSV outputs into long format")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except HypothesisError as exc:
        print(f"hypothesis not met: {exc}", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except (NumericalError, StabcertError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
