"""Model parameters, derived constants, Poisson clouds and the obstacle set."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *key)``.

    Distinct keys give statistically independent streams, so parallel tasks
    keyed by their task index replay identically whatever the worker count.
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i (lo_i, hi_i)``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi):
            raise InvalidParameterError("box corners have different dimensions")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def centered(cls, half: float, d: int, center=None) -> "Box":
        """The box ``center + (-half, half)^d``; ``B_ell`` is ``Box.centered(ell, d)``."""
        c = np.zeros(d) if center is None else np.asarray(center, dtype=float)
        return cls(tuple(c - half), tuple(c + half))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    def is_empty(self) -> bool:
        return bool(np.any(self.sides <= 0))

    def scaled(self, factor: float) -> "Box":
        """Image under the homothety ``x -> factor * x`` centred at the origin."""
        return Box(tuple(factor * v for v in self.lo), tuple(factor * v for v in self.hi))

    def dilated(self, r: float) -> "Box":
        """Bounding box of the ``r``-neighbourhood."""
        return Box(tuple(v - r for v in self.lo), tuple(v + r for v in self.hi))

    def contains(self, points, closed: bool = False) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if closed:
            return np.all((p >= lo) & (p <= hi), axis=1)
        return np.all((p > lo) & (p < hi), axis=1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(np.asarray(other.lo) >= np.asarray(self.lo))
                    and np.all(np.asarray(other.hi) <= np.asarray(self.hi)))

    def distance(self, points) -> np.ndarray:
        """Euclidean distance from each point to the closed box."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        return np.sqrt(np.sum(gap * gap, axis=1))

    def neighborhood_volume(self, r: float) -> float:
        """Volume of the open ``r``-neighbourhood (Steiner formula for a box)."""
        d = self.d
        sides = self.sides
        total = 0.0
        # intrinsic volume V_j of a box = elementary symmetric polynomial e_j(sides)
        e = np.zeros(d + 1)
        e[0] = 1.0
        for s in sides:
            e[1:] = e[1:] + s * e[:-1]
        for j in range(d + 1):
            total += e[j] * unit_ball_volume(d - j) * r ** (d - j)
        return float(total)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, data: dict) -> "Box":
        return cls(tuple(data["lo"]), tuple(data["hi"]))


# ---------------------------------------------------------------------------
# parameters and constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    d: int
    nu: float
    a: float
    seed: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidParameterError(f"d must be an integer >= 2, got {self.d}")
        # nu = 0 is allowed as the obstacle-free reference model
        if not self.nu >= 0:
            raise InvalidParameterError(f"nu must be >= 0, got {self.nu}")
        if not self.a > 0:
            raise InvalidParameterError(f"a must be > 0, got {self.a}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError("seed must fit in 64 bits")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class Constants:
    d: int
    nu: float
    omega_d: float
    lambda_d: float
    R0: float
    c0: float
    c1: float


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def bessel_j(order: float, x: float) -> float:
    """Bessel function of the first kind by its power series.

    Accurate to ~1e-14 absolute for the moderate arguments (x < 20) needed
    by first zeros of orders up to about 10.
    """
    if x == 0.0:
        return 1.0 if order == 0 else 0.0
    q = -(0.25 * x * x)
    term = math.exp(order * math.log(0.5 * x) - math.lgamma(order + 1))
    terms = [term]
    k = 0
    while True:
        k += 1
        term *= q / (k * (k + order))
        terms.append(term)
        if k > x and abs(term) < 1e-18:
            break
    return math.fsum(terms)


def bessel_first_zero(order: float, tol: float = 1e-13) -> float:
    """First positive zero of ``J_order`` by bracketed bisection."""
    if order < 0:
        raise InvalidParameterError("order must be >= 0")
    # J_order > 0 on (0, j_1) and j_1 > order + 1 for order >= 0
    lo = order + 1.0
    hi = lo + 0.25
    while bessel_j(order, hi) > 0:
        lo, hi = hi, hi + 0.25
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if bessel_j(order, mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ball_eigenvalue(d: int, r: float = 1.0) -> float:
    """Principal Dirichlet eigenvalue of -Δ/2 in the open ball of radius ``r``."""
    j = bessel_first_zero(d / 2 - 1)
    return 0.5 * j * j / (r * r)


def constants(d: int, nu: float) -> Constants:
    if int(d) != d or d < 2:
        raise InvalidParameterError(f"d must be an integer >= 2, got {d}")
    if not nu > 0:
        raise InvalidParameterError(f"nu must be > 0, got {nu}")
    d = int(d)
    omega = unit_ball_volume(d)
    lam = ball_eigenvalue(d)
    R0 = (d / (nu * omega)) ** (1.0 / d)
    return Constants(
        d=d,
        nu=float(nu),
        omega_d=omega,
        lambda_d=lam,
        R0=R0,
        c0=lam * R0 ** -2,
        c1=(4 * math.pi) ** (-d / 4) * math.e,
    )


# ---------------------------------------------------------------------------
# clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cloud:
    points: np.ndarray
    region: Box
    params: ModelParams
    key: tuple = field(default=())

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, self.region.d)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.region.d

    def tree(self) -> cKDTree | None:
        if len(self) == 0:
            return None
        return cKDTree(self.points)

    def with_points(self, points, region: Box | None = None) -> "Cloud":
        return Cloud(points, region or self.region, self.params, self.key)

    def restricted(self, box: Box, margin: float = 0.0) -> "Cloud":
        """Points within ``margin`` of ``box`` (the ones that can touch it)."""
        keep = box.distance(self.points) <= margin if len(self) else np.zeros(0, bool)
        return Cloud(self.points[keep], self.region, self.params, self.key)


def sample_cloud(region: Box, params: ModelParams, key=()) -> Cloud:
    """Poisson cloud of intensity ``params.nu`` in ``region``.

    The count is drawn first, then the points are placed uniformly. The
    stream is keyed by ``(params.seed, *key)``.
    """
    if region.is_empty():
        raise InvalidParameterError("sampling region is empty")
    if isinstance(key, (int, np.integer)):
        key = (key,)
    key = tuple(int(k) for k in key)
    rng = stream(params.seed, *key)
    lo = np.asarray(region.lo)
    n = rng.poisson(params.nu * region.volume) if params.nu > 0 else 0
    pts = lo + region.sides * rng.random((n, region.d))
    return Cloud(pts, region, params, key)


def is_vacant(x, cloud: Cloud, a: float) -> bool:
    """True iff ``x`` lies outside every closed ball ``B(y, a)``."""
    if len(cloud) == 0:
        return True
    diff = cloud.points - np.asarray(x, dtype=float)
    return bool(np.min(np.sum(diff * diff, axis=1)) > a * a)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_cloud(cloud: Cloud, path) -> tuple[Path, Path]:
    """CSV of points plus a JSON sidecar with the model parameters."""
    path = Path(path)
    d = cloud.d
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)])
        for p in cloud.points:
            w.writerow([repr(float(v)) for v in p])
    side = path.with_suffix(".json")
    meta = {
        "d": d,
        "nu": cloud.params.nu,
        "a": cloud.params.a,
        "seed": cloud.params.seed,
        "key": list(cloud.key),
        "region": cloud.region.to_dict(),
    }
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side


def read_cloud(path) -> Cloud:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if len(header) != meta["d"]:
        raise InvalidParameterError("CSV header does not match sidecar dimension")
    pts = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(-1, meta["d"])
    params = ModelParams(meta["d"], meta["nu"], meta["a"], meta["seed"])
    return Cloud(pts, Box.from_dict(meta["region"]), params, tuple(meta.get("key", ())))
