"""Flat ``key = value`` configuration with line-numbered validation.

Values are layered file < environment (``KL_<KEY>``) < command line. Every
violation found is reported, not only the first.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

from .errors import KLError

KINDS = ("gap-sweep", "quantile", "deconcentration", "dos", "bec")
ENV_PREFIX = "KL_"


def _floats(text: str) -> list[float]:
    items = [s for s in text.replace(";", ",").split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return [float(s) for s in items]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    kind: type | str
    default: object = None
    check: object = None
    doc: str = ""

    def convert(self, text: str):
        if self.kind is int:
            return int(text, 0)
        if self.kind is float:
            return float(text)
        if self.kind is bool:
            return _bool(text)
        if self.kind == "floats":
            return _floats(text)
        if isinstance(self.kind, tuple):
            if text not in self.kind:
                raise ValueError(f"expected one of {', '.join(self.kind)}")
            return text
        return text


def _pos(v):
    return v > 0 or "must be positive"


def _nonneg(v):
    return v >= 0 or "must be nonnegative"


def _dim(v):
    return v >= 2 or "dimension must be >= 2"


def _unit(v):
    return 0 < v < 1 or "must lie in (0, 1)"


def _all_pos(v):
    return all(x > 0 for x in v) or "all entries must be positive"


def _increasing(v):
    ok = all(x > 0 for x in v) and all(b > a for a, b in zip(v, v[1:]))
    return ok or "must be positive and strictly increasing"


def _seed(v):
    return 0 <= v < 2 ** 64 or "seed must be an unsigned 64-bit integer"


SCHEMA: dict[str, Key] = {
    # model
    "d": Key(int, 2, _dim, "dimension"),
    "nu": Key(float, 1.0, _pos, "Poisson intensity"),
    "a": Key(float, 0.3, _pos, "obstacle radius"),
    # run
    "seed": Key(int, 0, _seed, "master seed"),
    "out": Key(str, "out", None, "output directory"),
    "jobs": Key(int, 1, _pos, "parallel width"),
    "kind": Key(KINDS, None, None, "experiment kind"),
    # geometry
    "ell": Key(float, 20.0, lambda v: v > 1 or "ell must exceed 1", "box half-length"),
    "L0": Key(float, None, _pos, "override for the L0 box side"),
    "d0_int": Key(("compact", "wide"), "compact", None, "D0 interior convention"),
    "h": Key(float, 0.2, _pos, "grid spacing"),
    "k": Key(int, 2, _pos, "eigenpairs per domain"),
    "tol": Key(float, 1e-9, _pos, "eigensolver relative residual"),
    # budgets
    "samples": Key(int, 10, _pos, "realisations"),
    "trials": Key(int, 30, _pos, "independent box-family trials"),
    "mc": Key(int, 1000, _pos, "Monte Carlo samples"),
    "n_boot": Key(int, 1000, _pos, "bootstrap resamples"),
    # spectral statistics
    "sigma": Key("floats", [1.0], _all_pos, "resonance scale(s)"),
    "Gamma": Key("floats", [1.0], _all_pos, "quantile tuning parameter(s)"),
    "eta_hat": Key(float, None, _pos, "localization decay exponent"),
    # deconcentration
    "sigma0": Key(float, 0.01, _pos, "schedule base scale"),
    "m": Key(int, 3, _pos, "number of target intervals"),
    "c_bar": Key(float, 1.0, _pos, "schedule constant"),
    "c_star": Key(float, 5.0, _pos, "schedule constant"),
    "t": Key(float, None, _pos, "target level (deconcentration) or Laplace time (dos)"),
    "eps": Key(float, None, _pos, "target interval half-width"),
    "strict": Key(bool, True, None, "refuse interval families outside the disjointness regime"),
    # dos
    "L": Key(float, 12.0, _pos, "DOS box side"),
    "cut": Key(float, 6.0, _pos, "eigenvalue cut for the DOS"),
    "steps": Key(int, 512, lambda v: v >= 2 or "steps must be >= 2", "bridge time steps"),
    # bec
    "beta": Key(float, 1.0, _pos, "inverse temperature"),
    "rho": Key(float, None, _pos, "particle density"),
    "rho_c": Key(float, None, _pos, "critical density used for the theory line"),
    "N_list": Key("floats", [10.0, 20.0, 40.0], _increasing, "particle numbers"),
    "kmax": Key(int, 4000, _pos, "mode cap for the truncation rule"),
}

REQUIRED = {
    "deconcentration": ("t",),
    "bec": ("rho",),
}


class ConfigError(KLError):
    """All violations found while building a configuration."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


@dataclass
class Config:
    values: dict
    sources: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, name):
        return self.values[name]

    def replace(self, **kw) -> "Config":
        vals = dict(self.values)
        vals.update(kw)
        src = dict(self.sources)
        src.update({k: "override" for k in kw})
        return Config(vals, src)

    def canonical(self) -> dict:
        # jobs and out do not influence numeric results
        return {k: v for k, v in sorted(self.values.items()) if k not in ("jobs", "out")}

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()

    def params(self):
        from .model import ModelParams
        return ModelParams(self.d, self.nu, self.a, self.seed)


def _collect(text: str, source: str, errors: list[str]) -> dict[str, tuple[str, str]]:
    raw: dict[str, tuple[str, str]] = {}
    first_line: dict[str, int] = {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"{source}:{no}: expected 'key = value', got {body!r}")
            continue
        key, val = (s.strip() for s in body.split("=", 1))
        if not key:
            errors.append(f"{source}:{no}: missing key")
            continue
        if key in first_line:
            errors.append(f"{source}:{no}: duplicate key '{key}' (first set on line {first_line[key]})")
            continue
        first_line[key] = no
        raw[key] = (val, f"{source}:{no}")
    return raw


def parse_config(text: str, env: dict | None = None, overrides: dict | None = None,
                 source: str = "config") -> Config:
    """Validate a flat config document, layering environment and command-line overrides.

    ``env`` maps ``KL_<KEY>`` variables (default: none; pass ``os.environ`` to
    honour the process environment); ``overrides`` maps keys to strings.
    Raises :class:`ConfigError` listing every violation.
    """
    errors: list[str] = []
    raw = _collect(text, source, errors)
    for name, val in (env or {}).items():
        if name.startswith(ENV_PREFIX):
            raw[name[len(ENV_PREFIX):]] = (str(val), f"env {name}")
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = (str(val), f"option --{key}")
    values, sources = {}, {}
    for key, (text_val, where) in raw.items():
        spec = SCHEMA.get(key)
        if spec is None:
            errors.append(f"{where}: unknown key '{key}'")
            continue
        try:
            v = spec.convert(text_val)
        except ValueError as exc:
            errors.append(f"{where}: key '{key}': cannot read {text_val!r} ({exc})")
            continue
        if isinstance(v, float) and not math.isfinite(v):
            errors.append(f"{where}: key '{key}': value must be finite")
            continue
        if spec.check is not None:
            verdict = spec.check(v)
            if verdict is not True:
                errors.append(f"{where}: key '{key}': {verdict}")
                continue
        values[key] = v
        sources[key] = where
    for key, spec in SCHEMA.items():
        if key not in values:
            values[key] = spec.default
            sources[key] = "default"
    kind = values.get("kind")
    for key in REQUIRED.get(kind, ()):
        if values.get(key) is None:
            errors.append(f"key '{key}' is required for kind {kind}")
    if "eta_hat" in raw and values.get("eta_hat") is not None and not values["eta_hat"] < 1 / values["d"]:
        errors.append(f"{sources['eta_hat']}: key 'eta_hat': must lie in (0, 1/d)")
    if errors:
        raise ConfigError(errors)
    return Config(values, sources)


def load_config(path=None, overrides: dict | None = None, env=None) -> Config:
    """Read ``path`` (optional) and apply ``KL_*`` environment then command-line overrides."""
    text, source = "", "config"
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        source = str(path)
    return parse_config(text, dict(os.environ) if env is None else env, overrides, source)
