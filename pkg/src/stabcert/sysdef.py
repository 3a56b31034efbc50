"""System definitions: x' = A0(t) x + eps F(t) x + h(t, x, eps).

Systems are JSON documents whose matrix entries and perturbation components
are DSL expressions::

    {"name": "...", "dim": 2,
     "A0": [["-1", "-t"], ["t", "-1"]], "F": [["1", "-1"], ["1", "1"]],
     "h": ["0", "0"], "x0": [1, 2],
     "meta": {"c": 1, "gamma": 1, "k": ..., "K_override": ...,
              "phi": "...", "lambda": "...", "M_prime": ...}}

Unknown keys are rejected. Metadata values are taken verbatim as the
analytic (certified) path and echoed into reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import expr as ex
from .errors import ValidationError

__all__ = ["SystemDef", "SystemMeta", "SystemDefError", "load", "loads", "dumps",
           "to_document", "builtin_names", "rhs"]

_TOP_KEYS = {"name", "dim", "A0", "F", "h", "x0", "meta"}
_REQUIRED = _TOP_KEYS - {"meta"}
_META_NUM = {"c", "gamma", "k", "K_override", "M_prime"}
_META_EXPR = {"phi", "lambda"}


class SystemDefError(ValidationError):
    pass


@dataclass(frozen=True)
class SystemMeta:
    c: float | None = None
    gamma: float | None = None
    k: float | None = None
    K_override: float | None = None
    phi: ex.ScalarExpr | None = None
    lam: ex.ScalarExpr | None = None
    M_prime: float | None = None

    def as_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for key in ("c", "gamma", "k", "K_override", "M_prime"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.phi is not None:
            out["phi"] = ex.to_text(self.phi)
        if self.lam is not None:
            out["lambda"] = ex.to_text(self.lam)
        return out


def _const_or_fn(node: ex.ScalarExpr):
    f = ex.compile_expr(node)
    if "t" in ex.variables(node):
        return f, None
    return f, f(0.0)


@dataclass(frozen=True)
class SystemDef:
    name: str
    n: int
    A0: tuple[tuple[ex.ScalarExpr, ...], ...]
    F: tuple[tuple[ex.ScalarExpr, ...], ...]
    h: tuple[ex.ScalarExpr, ...]
    x0: tuple[float, ...]
    meta: SystemMeta = field(default_factory=SystemMeta)

    # compiled evaluators -------------------------------------------------
    @cached_property
    def _matrix_fns(self):
        def build(mat):
            fns = [[_const_or_fn(e) for e in row] for row in mat]
            if all(c is not None for row in fns for _, c in row):
                const = np.array([[c for _, c in row] for row in fns], dtype=float)
                return lambda t: const
            # constant entries are filled once; only the t-dependent ones are evaluated
            base = np.array([[0.0 if c is None else c for _, c in row] for row in fns])
            flat = [(i, j, f) for i, row in enumerate(fns) for j, (f, c) in enumerate(row)
                    if c is None]

            def mat_at(t):
                m = base.copy()
                for i, j, f in flat:
                    m[i, j] = f(t)
                return m
            return mat_at
        return build(self.A0), build(self.F)

    @cached_property
    def _h_fns(self):
        return [ex.compile_expr(e) for e in self.h]

    def A0_at(self, t: float) -> np.ndarray:
        return self._matrix_fns[0](float(t))

    def F_at(self, t: float) -> np.ndarray:
        return self._matrix_fns[1](float(t))

    def A_eps(self, eps: float) -> Callable[[float], np.ndarray]:
        A0, F = self._matrix_fns
        if eps == 0.0:
            return A0
        return lambda t: A0(t) + eps * F(t)

    def h_at(self, t: float, x, eps: float) -> np.ndarray:
        xs = list(map(float, x))
        return np.array([f(float(t), xs, float(eps)) for f in self._h_fns])

    @cached_property
    def h_is_zero(self) -> bool:
        return all(isinstance(e, ex.Num) and e.value == 0.0 for e in self.h)

    @cached_property
    def F_is_constant(self) -> bool:
        return all("t" not in ex.variables(e) for row in self.F for e in row)

    def rhs(self) -> Callable[[float, np.ndarray, float], np.ndarray]:
        return rhs(self)


def rhs(sys: SystemDef) -> Callable[[float, np.ndarray, float], np.ndarray]:
    """Vector field ``f(t, x, eps) = A0(t) x + eps F(t) x + h(t, x, eps)``."""
    A0, F = sys._matrix_fns
    hs = sys._h_fns
    if sys.h_is_zero:
        def f(t, x, eps):
            return A0(t) @ x + eps * (F(t) @ x)
    else:
        def f(t, x, eps):
            xs = x.tolist()
            h = np.array([hf(t, xs, eps) for hf in hs])
            return A0(t) @ x + eps * (F(t) @ x) + h
    return f


# ---------------------------------------------------------------------------
# loading

def _parse(source, where: str, allowed) -> ex.ScalarExpr:
    if not isinstance(source, str):
        raise SystemDefError(f"{where}: expected an expression string, got {source!r}")
    try:
        return ex.parse(source, allowed=allowed)
    except ex.ExprSyntaxError as exc:
        raise SystemDefError(f"{where}: {exc}") from exc


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SystemDefError(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def _matrix(doc, key: str, n: int, allowed):
    mat = doc[key]
    if not isinstance(mat, list) or len(mat) != n or any(
            not isinstance(row, list) or len(row) != n for row in mat):
        raise SystemDefError(f"{key}: expected {n}x{n} array of expression strings")
    out = []
    for i, row in enumerate(mat):
        parsed = []
        for j, src in enumerate(row):
            where = f"{key}[{i}][{j}]"
            node = _parse(src, where, None)
            bad = ex.variables(node) - set(allowed)
            if bad:
                kind = "state variable" if any(v.startswith("x") for v in bad) else "variable"
                raise SystemDefError(f"{where}: {kind} {', '.join(sorted(bad))} not allowed in {key} "
                                     f"(only t)")
            parsed.append(node)
        out.append(tuple(parsed))
    return tuple(out)


def from_document(doc: dict) -> SystemDef:
    if not isinstance(doc, dict):
        raise SystemDefError("system document must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SystemDefError(f"unknown keys: {', '.join(sorted(unknown))}")
    missing = _REQUIRED - set(doc)
    if missing:
        raise SystemDefError(f"missing keys: {', '.join(sorted(missing))}")
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise SystemDefError("name: expected a non-empty string")
    n = doc["dim"]
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise SystemDefError(f"dim: expected a positive integer, got {n!r}")

    A0 = _matrix(doc, "A0", n, {"t"})
    F = _matrix(doc, "F", n, {"t"})

    states = {f"x{i}" for i in range(1, n + 1)}
    h_doc = doc["h"]
    if not isinstance(h_doc, list) or len(h_doc) != n:
        raise SystemDefError(f"h: expected array of {n} expression strings")
    h = []
    for i, src in enumerate(h_doc):
        node = _parse(src, f"h[{i}]", None)
        bad = ex.variables(node) - states - {"t", "eps"}
        if bad:
            raise SystemDefError(f"h[{i}]: {', '.join(sorted(bad))} out of range for dim {n}")
        h.append(node)

    x0_doc = doc["x0"]
    if not isinstance(x0_doc, list) or len(x0_doc) != n:
        raise SystemDefError(f"x0: expected array of {n} numbers")
    x0 = tuple(_number(v, f"x0[{i}]") for i, v in enumerate(x0_doc))

    meta_doc = doc.get("meta", {})
    if not isinstance(meta_doc, dict):
        raise SystemDefError("meta: expected an object")
    unknown = set(meta_doc) - _META_NUM - _META_EXPR
    if unknown:
        raise SystemDefError(f"meta: unknown keys: {', '.join(sorted(unknown))}")
    kw: dict[str, Any] = {k: _number(meta_doc[k], f"meta.{k}") for k in _META_NUM & set(meta_doc)}
    for key in ("c", "gamma", "K_override"):
        if key in kw and not kw[key] > 0:
            raise SystemDefError(f"meta.{key}: must be positive")
    for key in ("k", "M_prime"):
        if key in kw and kw[key] < 0:
            raise SystemDefError(f"meta.{key}: must be nonnegative")
    if ("c" in kw) != ("gamma" in kw):
        raise SystemDefError("meta: c and gamma must be given together")
    if "phi" in meta_doc:
        kw["phi"] = _parse(meta_doc["phi"], "meta.phi", {"t"})
    if "lambda" in meta_doc:
        kw["lam"] = _parse(meta_doc["lambda"], "meta.lambda", {"t", "eps"})
    return SystemDef(name=name, n=n, A0=A0, F=F, h=tuple(h), x0=x0, meta=SystemMeta(**kw))


def loads(text: str) -> SystemDef:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemDefError(f"invalid JSON: {exc}") from exc
    return from_document(doc)


def builtin_names() -> list[str]:
    files = resources.files("stabcert.systems")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load(source: str | Path) -> SystemDef:
    """Load a built-in system by name, a JSON file path, or inline JSON text."""
    text = str(source)
    if text in builtin_names():
        return loads(resources.files("stabcert.systems").joinpath(f"{text}.json").read_text())
    if text.lstrip().startswith("{"):
        return loads(text)
    path = Path(text)
    if not path.is_file():
        raise SystemDefError(f"no built-in system or file named {text!r} "
                             f"(built-ins: {', '.join(builtin_names())})")
    return loads(path.read_text(encoding="utf-8"))


def to_document(sys: SystemDef) -> dict:
    doc = {
        "name": sys.name,
        "dim": sys.n,
        "A0": [[ex.to_text(e) for e in row] for row in sys.A0],
        "F": [[ex.to_text(e) for e in row] for row in sys.F],
        "h": [ex.to_text(e) for e in sys.h],
        "x0": list(sys.x0),
    }
    meta = sys.meta.as_dict()
    if meta:
        doc["meta"] = meta
    return doc


def dumps(sys: SystemDef) -> str:
    return json.dumps(to_document(sys), indent=2, sort_keys=True)
