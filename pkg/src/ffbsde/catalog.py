"""Built-in coefficient families selectable from a problem config.

Problem section schema (JSON object; unknown keys are rejected)::

    n, m, d              positive integers
    T                    horizon > 0
    x0                   list of n numbers
    coefficient_family   "zero" | "constant_terminal" | "affine" | "lq"
    family_params        object, keys depend on the family (below)
    lipschitz_L          number > 0, or null for the family's own constant
    rho_kind             "linear" | "power" | "custom"
    rho_scale            c in rho(u) = c u or c u^p (linear/power)
    rho_power            p for rho_kind = "power"
    markovian            must be true

Family parameters:

    zero               {}
    constant_terminal  {"value": [m numbers]}             F = 0, G = value
    affine             b, bbar, sigma, f1, f2, f3, g1, g2, g3 numbers and
                       f4, g4 polynomial coefficients in t (lowest first);
                       needs n = m = d = 1
    lq                 a, c, sigma, q, r, g, gamma, lam; needs n = m = d = 1

``rho_kind = "custom"`` uses the modulus computed by the family.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from numpy.polynomial import Polynomial

from .errors import ConfigError
from .model import ProblemSpec
from .oracle import AffineProblemSpec, build_lq_control_problem

PROBLEM_DEFAULTS = {
    "n": 1,
    "m": 1,
    "d": 1,
    "T": 0.5,
    "x0": [1.0],
    "coefficient_family": "zero",
    "family_params": {},
    "lipschitz_L": None,
    "rho_kind": "custom",
    "rho_scale": 1.0,
    "rho_power": 1.0,
    "markovian": True,
}

FAMILY_DEFAULTS = {
    "zero": {},
    "constant_terminal": {"value": None},
    "affine": {"b": 0.0, "bbar": 0.0, "sigma": 0.0, "f1": 0.0, "f2": 0.0, "f3": 0.0,
               "f4": [0.0], "g1": 0.0, "g2": 0.0, "g3": 0.0, "g4": [0.0]},
    "lq": {"a": 0.0, "c": 1.0, "sigma": 0.0, "q": 0.0, "r": 1.0, "g": 0.0, "gamma": 0.0,
           "lam": 0.0},
}

RHO_KINDS = ("linear", "power", "custom")


def _num(where, v, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ConfigError(f"{where}: expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"{where}: must be positive, got {v!r}")
    return float(v)


def _int(where, v):
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise ConfigError(f"{where}: expected a positive integer, got {v!r}")
    return v


def _numlist(where, v, length=None):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{where}: expected a non-empty list of numbers")
    out = [_num(f"{where}[{i}]", x) for i, x in enumerate(v)]
    if length is not None and len(out) != length:
        raise ConfigError(f"{where}: expected {length} entries, got {len(out)}")
    return out


def normalize_problem(cfg, where="problem"):
    """Validate a problem section and return it with every default filled in."""
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(cfg) - set(PROBLEM_DEFAULTS))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = {k: cfg.get(k, v) for k, v in PROBLEM_DEFAULTS.items()}
    for k in ("n", "m", "d"):
        out[k] = _int(f"{where}.{k}", out[k])
    out["T"] = _num(f"{where}.T", out["T"], positive=True)
    out["x0"] = _numlist(f"{where}.x0", out["x0"], out["n"])
    fam = out["coefficient_family"]
    if fam not in FAMILY_DEFAULTS:
        raise ConfigError(f"{where}.coefficient_family: unknown family {fam!r}; "
                          f"choose from {', '.join(FAMILY_DEFAULTS)}")
    params = out["family_params"]
    if not isinstance(params, dict):
        raise ConfigError(f"{where}.family_params: expected an object")
    unknown = sorted(set(params) - set(FAMILY_DEFAULTS[fam]))
    if unknown:
        raise ConfigError(f"{where}.family_params: unknown key(s) {', '.join(unknown)} "
                          f"for family {fam!r}")
    params = {k: params.get(k, v) for k, v in FAMILY_DEFAULTS[fam].items()}
    pw = f"{where}.family_params"
    if fam == "constant_terminal":
        if params["value"] is None:
            params["value"] = [0.0] * out["m"]
        params["value"] = _numlist(f"{pw}.value", params["value"], out["m"])
    elif fam in ("affine", "lq"):
        if (out["n"], out["m"], out["d"]) != (1, 1, 1):
            raise ConfigError(f"{where}: family {fam!r} needs n = m = d = 1")
        for k, v in params.items():
            if k in ("f4", "g4"):
                params[k] = _numlist(f"{pw}.{k}", v)
            else:
                params[k] = _num(f"{pw}.{k}", v)
        if fam == "lq" and not params["r"] > 0:
            raise ConfigError(f"{pw}.r: control cost weight must be positive")
    out["family_params"] = params
    if out["lipschitz_L"] is not None:
        out["lipschitz_L"] = _num(f"{where}.lipschitz_L", out["lipschitz_L"], positive=True)
    if out["rho_kind"] not in RHO_KINDS:
        raise ConfigError(f"{where}.rho_kind: expected one of {', '.join(RHO_KINDS)}")
    out["rho_scale"] = _num(f"{where}.rho_scale", out["rho_scale"])
    if out["rho_scale"] < 0:
        raise ConfigError(f"{where}.rho_scale: must be non-negative")
    out["rho_power"] = _num(f"{where}.rho_power", out["rho_power"], positive=True)
    if out["markovian"] is not True:
        raise ConfigError(f"{where}.markovian: only markovian problems are supported")
    return out


def affine_from_params(params, x0, T):
    p = dict(params)
    p["f4"] = Polynomial(p["f4"])
    p["g4"] = Polynomial(p["g4"])
    return AffineProblemSpec(x0=x0, T=T, **p)


def build_problem(cfg):
    """ProblemSpec from a (normalized or raw) problem section."""
    cfg = normalize_problem(cfg)
    fam, params = cfg["coefficient_family"], cfg["family_params"]
    n, m, d, T, x0 = cfg["n"], cfg["m"], cfg["d"], cfg["T"], cfg["x0"]
    if fam == "zero":
        spec = _zero_spec(n, m, d, T, x0)
    elif fam == "constant_terminal":
        spec = _constant_terminal_spec(n, m, d, T, x0, np.array(params["value"]))
    elif fam == "affine":
        spec = affine_from_params(params, x0[0], T).to_problem_spec()
    else:
        spec = build_lq_control_problem(x0=x0[0], T=T, **params).spec
    changes = {}
    if cfg["lipschitz_L"] is not None:
        changes["lipschitz_L"] = cfg["lipschitz_L"]
    c, pw = cfg["rho_scale"], cfg["rho_power"]
    if cfg["rho_kind"] == "linear":
        changes["rho"] = lambda u, c=c: c * u
    elif cfg["rho_kind"] == "power":
        changes["rho"] = lambda u, c=c, pw=pw: c * abs(u) ** pw
    return replace(spec, **changes) if changes else spec


def build_affine(cfg):
    cfg = normalize_problem(cfg)
    if cfg["coefficient_family"] != "affine":
        raise ConfigError("problem.coefficient_family: an affine problem is required")
    return affine_from_params(cfg["family_params"], cfg["x0"][0], cfg["T"])


def build_control(cfg):
    cfg = normalize_problem(cfg)
    if cfg["coefficient_family"] != "lq":
        raise ConfigError("problem.coefficient_family: an lq problem is required")
    return build_lq_control_problem(x0=cfg["x0"][0], T=cfg["T"], **cfg["family_params"])


def _zero_spec(n, m, d, T, x0):
    def B(s, x, eta):
        return 0.0

    def Sigma(s, x, eta):
        return 0.0

    def F(t, s, xi, xbar, x, eta, y, z):
        return 0.0

    def G(t, xi, xbar, x):
        return 0.0

    return ProblemSpec(n=n, m=m, d=d, T=T, x0=x0, B=B, Sigma=Sigma, F=F, G=G,
                       lipschitz_L=1e-12, rho=lambda u: 0.0 * u, depends_on_anchor=False,
                       name="zero", anchor_batched=True)


def _constant_terminal_spec(n, m, d, T, x0, value):
    def B(s, x, eta):
        return 0.0

    def Sigma(s, x, eta):
        return 0.0

    def F(t, s, xi, xbar, x, eta, y, z):
        return 0.0

    def G(t, xi, xbar, x):
        return value

    return ProblemSpec(n=n, m=m, d=d, T=T, x0=x0, B=B, Sigma=Sigma, F=F, G=G,
                       lipschitz_L=1e-12, rho=lambda u: 0.0 * u, depends_on_anchor=False,
                       name="constant_terminal", anchor_batched=True)
