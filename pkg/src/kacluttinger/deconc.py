"""Blow-up of clouds, the likelihood ratio of the dilated law, the u-schedule,
target intervals, the two-sided eigenvalue sandwich and the ratio experiment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree

from .eigen import Spectrum, smallest_eigenpairs
from .errors import InvalidParameterError, RegimeViolationError, ScheduleInfeasibleError
from .grid import build_mask
from .model import Box, Cloud, ModelParams, sample_cloud
from .spectral import QuantileSpec, localization_check


def K_constant(d: int, nu: float, a: float) -> float:
    """Probability inflation constant ``exp(2 d ν (1 + 2a)^d)``."""
    return math.exp(2 * d * nu * (1 + 2 * a) ** d)


def expansion_ratio(u: float, D0_volume: float, d: int) -> float:
    """``e^{u/|D0|}``, checked against ``ratio^d <= 2``."""
    if not 0 <= u < 1:
        raise InvalidParameterError(f"u must lie in [0, 1), got {u}")
    if not D0_volume > 0:
        raise InvalidParameterError("D0 volume must be positive")
    if d * u / D0_volume > math.log(2):
        raise InvalidParameterError("expansion ratio^d exceeds 2: D0 too small for this u")
    return math.exp(u / D0_volume)


@dataclass(frozen=True)
class BlowUp:
    u: float
    D0: Box
    a: float
    ratio: float

    @classmethod
    def make(cls, u: float, D0: Box, a: float) -> "BlowUp":
        return cls(float(u), D0, float(a), expansion_ratio(u, D0.volume, D0.d))

    @property
    def D0_volume(self) -> float:
        return self.D0.volume

    @property
    def D0a_volume(self) -> float:
        """Volume of the open a-neighbourhood of D0."""
        return self.D0.neighborhood_volume(self.a)

    def scaled_neighborhood_count(self, cloud: Cloud) -> int:
        """Number of cloud points in ``ratio * D0^a``."""
        if len(cloud) == 0:
            return 0
        lamD0 = self.D0.scaled(self.ratio)
        return int(np.count_nonzero(lamD0.distance(cloud.points) < self.ratio * self.a))


def blow_up(cloud: Cloud, u: float, D0_volume: float) -> Cloud:
    """Image of the cloud under ``x -> e^{u/|D0|} x``; the radius is left to the caller."""
    lam = expansion_ratio(u, D0_volume, cloud.d)
    if u == 0:
        return cloud
    return Cloud(cloud.points * lam, cloud.region.scaled(lam), cloud.params, cloud.key)


def rn_weight_from_count(N, u: float, D0_volume: float, D0a_volume: float, nu: float, d: int):
    """``exp{ν(λ^d - 1)|D0^a|} exp{-(d u/|D0|) N}`` (vectorised over ``N``)."""
    lam_d = expansion_ratio(u, D0_volume, d) ** d
    N = np.asarray(N, dtype=float)
    w = np.exp(nu * (lam_d - 1) * D0a_volume - (d * u / D0_volume) * N)
    return float(w) if w.ndim == 0 else w


def rn_weight(cloud: Cloud, u: float, D0: Box, a: float, nu: float | None = None) -> float:
    """Likelihood ratio of the ``ν/λ^d``-law against the ``ν``-law on ``λ D0^a``."""
    bu = BlowUp.make(u, D0, a)
    nu = cloud.params.nu if nu is None else nu
    return rn_weight_from_count(bu.scaled_neighborhood_count(cloud), u, D0.volume,
                                bu.D0a_volume, nu, D0.d)


# ---------------------------------------------------------------------------
# scaling identity
# ---------------------------------------------------------------------------

@dataclass
class ScaledResult:
    lam_orig: float
    lam_scaled: float
    ratio: float
    spec_orig: Spectrum
    spec_scaled: Spectrum

    @property
    def scaling_error(self) -> float:
        """``|λ̃1 ratio^2 - λ1| / λ1``."""
        if not math.isfinite(self.lam_orig):
            return 0.0 if not math.isfinite(self.lam_scaled) else math.inf
        return abs(self.lam_scaled * self.ratio ** 2 - self.lam_orig) / self.lam_orig

    def eigenfunction_mismatch(self) -> float:
        """Max-norm gap between ``φ̃1`` and ``ratio^{-d/2} φ1(·/ratio)`` on matched nodes."""
        a, b = self.spec_scaled, self.spec_orig
        if a.is_empty or b.is_empty:
            return 0.0
        d = b.d
        return float(np.max(np.abs(a.principal_eigenfunction()
                                   - self.ratio ** (-d / 2) * b.principal_eigenfunction())))


def scaled_eigenproblem(cloud: Cloud, u: float, D0: Box, a: float, h: float,
                        D0_volume: float | None = None, k: int = 1) -> ScaledResult:
    """λ1 on ``D0`` minus ``B(x, a)`` and on ``λ D0`` minus ``B(λ x, λ a)``.

    The scaled problem is rasterised at spacing ``λ h`` with the scaled anchor,
    so its nodes are the images of the original nodes.
    """
    vol = D0.volume if D0_volume is None else D0_volume
    lam = expansion_ratio(u, vol, D0.d)
    dom = build_mask(D0, cloud, a, h)
    spec = smallest_eigenpairs(dom, k)
    if u == 0:
        return ScaledResult(spec.lambda1, spec.lambda1, 1.0, spec, spec)
    big = blow_up(cloud, u, vol)
    D0s = D0.scaled(lam)
    dom_s = build_mask(D0s, big, lam * a, lam * h, anchor=tuple(lam * v for v in dom.anchor))
    spec_s = smallest_eigenpairs(dom_s, k)
    return ScaledResult(spec.lambda1, spec_s.lambda1, lam, spec, spec_s)


# ---------------------------------------------------------------------------
# schedule and target intervals
# ---------------------------------------------------------------------------

def u_recursive(sigma0, m: int, c_bar, c_star) -> list:
    """``u_0 = 0``, ``u_{i+1} = c̄σ0 + (c*+2) u_i``; returns ``u_1..u_m``.

    Works with any number type closed under + and * (floats, Fractions).
    """
    u, out = 0 * sigma0, []
    for _ in range(m):
        u = c_bar * sigma0 + (c_star + 2) * u
        out.append(u)
    return out


def u_closed_form(sigma0, i: int, c_bar, c_star):
    """``c̄σ0((c*+2)^i - 1)/(c*+1)``."""
    return c_bar * sigma0 * ((c_star + 2) ** i - 1) / (c_star + 1)


@dataclass(frozen=True)
class Schedule:
    sigma0: float
    m: int
    c_bar: float
    c_star: float
    u_list: tuple
    K: float | None = None


def schedule(sigma0: float, m: int, c_bar: float = 1.0, c_star: float = 5.0,
             params: ModelParams | None = None) -> Schedule:
    """Increasing ``u_1 < ... < u_m`` in (0, 1); ``K`` is attached when ``params`` is given."""
    if not (sigma0 > 0 and c_bar > 0 and c_star > 0):
        raise InvalidParameterError("sigma0, c_bar and c_star must be positive")
    if int(m) != m or m < 1:
        raise InvalidParameterError("m must be a positive integer")
    us = u_recursive(sigma0, int(m), c_bar, c_star)
    if us[-1] >= 1:
        raise ScheduleInfeasibleError(f"u_m = {float(us[-1]):.6g} >= 1; shrink sigma0")
    K = K_constant(params.d, params.nu, params.a) if params is not None else None
    return Schedule(sigma0, int(m), c_bar, c_star, tuple(float(v) for v in us), K)


def intervals_regime(t: float, eps: float, sched: Schedule, D0_volume: float,
                     eta: float) -> bool:
    """Whether ``2u_{i+1} > (c*+2)u_i + |D0|(log(1+ε/t) + 5η|D0|^{1/2})`` for all ``i``."""
    gap = D0_volume * (math.log1p(eps / t) + 5 * eta * math.sqrt(D0_volume))
    prev = 0.0
    for u in sched.u_list:
        if not 2 * u > (sched.c_star + 2) * prev + gap:
            return False
        prev = u
    return True


def target_intervals(t: float, eps: float, sched: Schedule, D0_volume: float,
                     eta: float, strict: bool = True) -> list[tuple[float, float]]:
    """Closed intervals ``J_i``, checked pairwise disjoint and inside ``(0, t)``.

    ``strict=False`` skips the check (used for degenerate diagnostic runs).
    """
    if not t > 0:
        raise InvalidParameterError("t must be positive")
    if eps < 0 or eta < 0:
        raise InvalidParameterError("eps and eta must be nonnegative")
    out = []
    for u in sched.u_list:
        lo = t * math.exp(-(sched.c_star + 2) * u / D0_volume)
        hi = (t + eps) * math.exp(5 * eta * math.sqrt(D0_volume) - 2 * u / D0_volume)
        out.append((lo, hi))
    bad = []
    for i, (lo, hi) in enumerate(out):
        if not (0 < lo <= hi < t):
            bad.append(f"J_{i + 1} = [{lo:.10g}, {hi:.10g}] not inside (0, {t:.10g})")
    for i in range(len(out) - 1):
        if not out[i + 1][1] < out[i][0]:
            bad.append(f"J_{i + 2} overlaps J_{i + 1}")
    if bad and strict:
        raise RegimeViolationError("; ".join(bad))
    return out


def t2_choice(c7: float, u: float, D0_volume: float) -> float:
    """``c7 u / |D0|^{3/2}``."""
    return c7 * u / D0_volume ** 1.5


# ---------------------------------------------------------------------------
# sandwich inequalities
# ---------------------------------------------------------------------------

@dataclass
class SandwichReport:
    lam: float
    lam_tilde: float
    max_outside: float
    max_near: float
    t1: float
    t2: float
    hyp1: bool
    hyp2: bool
    bound1: float
    bound2: float
    slack1: float
    slack2: float

    def holds(self, tol: float = 0.0) -> bool:
        """Conclusions hold (relative slack ``>= -tol``) wherever hypotheses do."""
        ok1 = (not self.hyp1) or self.slack1 >= -tol
        ok2 = (not self.hyp2) or self.slack2 >= -tol
        return ok1 and ok2


def sandwich_check(cloud: Cloud, u: float, D0: Box, a: float, h: float,
                   t1: float | None = None, t2: float | None = None) -> SandwichReport:
    """Compare λ1 on ``D0`` (radius ``a``) with λ̃1 on ``λ D0`` (same points, radius ``λ a``).

    Both problems share one lattice anchored at the origin, on which the two
    comparisons hold exactly whenever their hypotheses do. A threshold left as
    ``None`` is set to the measured value of the hypothesis, i.e. the
    sharpest admissible choice.
    """
    vol = D0.volume
    cap = 1 / (4 * math.sqrt(vol))
    for name, t in (("t1", t1), ("t2", t2)):
        if t is not None and not 0 <= t < cap:
            raise InvalidParameterError(f"{name} must lie in [0, 1/(4|D0|^(1/2))) = [0, {cap:.6g})")
    lam = expansion_ratio(u, vol, D0.d)
    origin = tuple(0.0 for _ in range(D0.d))
    big = D0.scaled(lam)
    near_cloud = cloud.restricted(big, margin=lam * a)
    dom = build_mask(D0, near_cloud, a, h, anchor=origin)
    dom_t = build_mask(big, near_cloud, lam * a, h, anchor=origin)
    spec = smallest_eigenpairs(dom, 1)
    spec_t = smallest_eigenpairs(dom_t, 1)

    # hypothesis of the first comparison: φ̃ small off the open D0
    if spec_t.is_empty:
        m1 = 0.0
    else:
        phi_t = spec_t.principal_eigenfunction()
        off = ~D0.contains(dom_t.coordinates())
        m1 = float(np.max(np.abs(phi_t[off]))) if off.any() else 0.0
    # hypothesis of the second: φ small on the dilated balls meeting D0
    if spec.is_empty:
        m2 = 0.0
    else:
        phi = spec.principal_eigenfunction()
        xyz = dom.coordinates()
        pts = near_cloud.points[D0.distance(near_cloud.points) < lam * a] if len(near_cloud) else np.zeros((0, D0.d))
        if len(pts):
            dist, _ = cKDTree(pts).query(xyz)
            hit = dist <= lam * a
            m2 = float(np.max(np.abs(phi[hit]))) if hit.any() else 0.0
        else:
            m2 = 0.0
    t1v = m1 if t1 is None else t1
    t2v = m2 if t2 is None else t2
    hyp1 = m1 <= t1v and t1v < cap
    hyp2 = m2 <= t2v and t2v < cap
    l, lt = spec.lambda1, spec_t.lambda1
    b1 = lt / (1 - 4 * t1v * math.sqrt(vol)) if t1v < cap else math.inf
    b2 = l / (1 - 4 * t2v * math.sqrt(vol)) if t2v < cap else math.inf
    s1 = _rel_slack(b1, l)
    s2 = _rel_slack(b2, lt)
    return SandwichReport(l, lt, m1, m2, t1v, t2v, hyp1, hyp2, b1, b2, s1, s2)


def _rel_slack(bound: float, value: float) -> float:
    if math.isinf(bound):
        return math.inf
    if math.isinf(value):
        return -math.inf
    return (bound - value) / value


# ---------------------------------------------------------------------------
# ratio experiment
# ---------------------------------------------------------------------------

def wilson(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    c = (p + z * z / (2 * n)) / den
    w = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, c - w), min(1.0, c + w)


@dataclass
class DeconcRow:
    seed: int
    lambda1: float
    loc_pass: bool
    in_J: bool
    in_Ji: list
    weights: list


@dataclass
class DeconcReport:
    params: dict
    J: tuple
    intervals: list
    lhs: float
    rhs: list
    ratios: list
    ratio_ci: list
    exceeds_K: list
    K: float
    n: int
    counts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "J": list(self.J),
            "intervals": [list(j) for j in self.intervals],
            "lhs": self.lhs,
            "rhs": self.rhs,
            "ratios": self.ratios,
            "ci": self.ratio_ci,
            "exceeds_K": self.exceeds_K,
            "K": self.K,
            "n": self.n,
            "counts": self.counts,
        }


def deconc_task(params: ModelParams, qs: QuantileSpec, h: float, seed_index: int,
                J: tuple, intervals: list, sched: Schedule) -> DeconcRow:
    """One independent realisation: λ1(D0), localisation, and interval membership."""
    D0 = qs.box()
    cloud = sample_cloud(D0.dilated(params.a), params, key=(0xDEC0, seed_index))
    dom = build_mask(D0, cloud, params.a, h)
    spec = smallest_eigenpairs(dom, 1)
    loc = localization_check(spec, D0, qs.interior(), qs.eta_ell)
    l1 = spec.lambda1
    in_J = bool(J[0] <= l1 <= J[1])
    in_Ji = [bool(lo <= l1 <= hi) for lo, hi in intervals]
    ws = [rn_weight(cloud, u, D0, params.a) for u in sched.u_list]
    return DeconcRow(seed_index, l1, loc.passed, in_J, in_Ji, ws)


def summarize_deconc(rows: list[DeconcRow], params: ModelParams, qs: QuantileSpec,
                     J: tuple, intervals: list, sched: Schedule, extra: dict | None = None) -> DeconcReport:
    """Estimate ``P[λ1 ∈ J, localised]`` and ``P[λ1 ∈ J_i]`` with ratio intervals."""
    n = len(rows)
    K = K_constant(params.d, params.nu, params.a)
    kA = sum(r.in_J and r.loc_pass for r in rows)
    lhs = kA / n if n else math.nan
    lA = wilson(kA, n)
    rhs, ratios, cis, flags, krhs = [], [], [], [], []
    for i in range(len(intervals)):
        ki = sum(r.in_Ji[i] for r in rows)
        krhs.append(ki)
        rhs.append(ki / n if n else math.nan)
        if ki == 0:
            ratios.append(None)
            cis.append(None)
            flags.append(False)
            continue
        li = wilson(ki, n)
        ratios.append(lhs / (ki / n))
        ci = [lA[0] / li[1], lA[1] / li[0] if li[0] > 0 else math.inf]
        cis.append(ci)
        flags.append(bool(ci[0] > K))
    info = {"d": params.d, "nu": params.nu, "a": params.a, "seed": params.seed,
            "ell": qs.ell, "L0": qs.L0, "eta_ell": qs.eta_ell, "eps_ell": qs.eps_ell,
            "u": list(sched.u_list), "c_bar": sched.c_bar, "c_star": sched.c_star,
            "sigma0": sched.sigma0}
    if extra:
        info.update(extra)
    return DeconcReport(info, tuple(J), list(intervals), lhs, rhs, ratios, cis, flags, K, n,
                        {"A": kA, "J_i": krhs}, rows)


def deconcentration_experiment(params: ModelParams, qs: QuantileSpec, sched: Schedule,
                               t: float, n_seeds: int, h: float, eps: float | None = None,
                               map_fn=map, strict: bool = True) -> DeconcReport:
    """Monte Carlo estimate of both sides of the deconcentration comparison.

    ``map_fn`` may be a parallel map; results are merged by seed index, so the
    report does not depend on the worker count.
    """
    eps = qs.eps_ell if eps is None else eps
    J = (t, t + eps)
    intervals = target_intervals(t, eps, sched, qs.L0 ** qs.d, qs.eta_ell, strict)
    tasks = [(params, qs, h, i, J, intervals, sched) for i in range(n_seeds)]
    rows = list(map_fn(_deconc_star, tasks))
    rows.sort(key=lambda r: r.seed)
    return summarize_deconc(rows, params, qs, J, intervals, sched, {"t": t, "h": h})


def _deconc_star(args):
    return deconc_task(*args)
