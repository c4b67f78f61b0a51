"""Grand-canonical ideal Bose gas over computed spectra and the condensation experiment."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx

from .dos import DosEstimate, free_weyl_count
from .eigen import DENSE_VALUES_MAX, DENSE_VALUES_RATIO, Spectrum, smallest_eigenpairs
from .errors import DivergenceError, InvalidParameterError, SaturationError
from .grid import build_mask
from .model import Box, ModelParams, sample_cloud, unit_ball_volume

TRUNCATION_RTOL = 1e-6


@dataclass
class BecState:
    beta: float
    rho: float
    N: float
    ell: float
    lambda_bar: np.ndarray
    mu: float
    occupations: np.ndarray
    truncation_bound: float = math.nan
    meta: dict = field(default_factory=dict)

    @property
    def volume(self) -> float:
        d = int(self.meta.get("d", 2))
        return (2 * self.ell) ** d

    @property
    def condensate_fraction(self) -> float:
        return float(self.occupations[0] / self.N)

    @property
    def density_residual(self) -> float:
        return abs(float(np.sum(self.occupations)) / self.volume - self.rho)


def free_box_eigenvalues(ell: float, d: int, k: int) -> np.ndarray:
    """The ``k`` lowest Dirichlet eigenvalues of ``-Δ/2`` on ``(-ell, ell)^d``, with multiplicity."""
    kmax = 1
    while kmax ** d < k or kmax < 2:
        kmax += 1
    # every one of the k lowest modes has all quantum numbers <= ceil(k^(1/d)) + 1
    ns = np.arange(1, kmax + 2)
    sq = np.array(sorted(sum(c) for c in itertools.product(ns ** 2, repeat=d)))
    return (math.pi ** 2 / 2) * sq[:k] / (2 * ell) ** 2


def modified_spectrum(spec: Spectrum, ell: float, k: int | None = None) -> np.ndarray:
    """Spectrum with the empty-domain fallback: free box eigenvalues shifted by 1."""
    k = spec.k if k is None else int(k)
    if spec.is_empty:
        return free_box_eigenvalues(ell, spec.d, k) + 1.0
    return np.asarray(spec.eigenvalues[:k], float)


def critical_density(dos: DosEstimate, beta: float) -> float:
    """``∫ (e^{βλ} - 1)^{-1} dm(λ)``.

    With stored atoms the sum is exact per realisation, plus the free-Weyl
    estimate of the part above the completeness cut. A tabulated measure is
    integrated by assigning the mass of ``(λ_{i-1}, λ_i]`` to ``λ_i``.
    """
    if not beta > 0:
        raise InvalidParameterError("beta must be positive")
    if dos.atoms:
        atoms = [(lam, vol) for lam, vol, cut in dos.atoms if cut >= dos.valid_below]
        bad = [float(lam.min()) for lam, _ in atoms if lam.size and lam.min() <= 0]
        if bad:
            raise DivergenceError("spectral mass at or below 0", bins=bad)
        vals = [np.sum(1.0 / np.expm1(beta * lam)) / vol for lam, vol in atoms]
        return float(np.mean(vals)) + _weyl_bose_tail(beta, 0.0, dos.valid_below,
                                                      int(dos.meta.get("d", 2)))
    lam = np.asarray(dos.lambdas, float)
    dm = np.diff(np.concatenate([[0.0], dos.cumulative]))
    bad = np.flatnonzero((lam <= 0) & (dm > 0))
    if bad.size:
        raise DivergenceError("mass piling at 0", bins=[int(i) for i in bad])
    mask = dm != 0
    return float(np.sum(dm[mask] / np.expm1(beta * lam[mask])))


def _scaled_upper_gamma(k: float, x: float) -> float:
    """``e^x Γ(k, x)`` for integer or half-integer ``k``, by upward recurrence."""
    if abs(2 * k - round(2 * k)) > 1e-12 or k <= 0:
        raise InvalidParameterError("k must be a positive integer or half-integer")
    if abs(k - round(k)) < 1e-12:
        s, g = 1.0, 1.0
    else:
        s, g = 0.5, math.sqrt(math.pi) * erfcx(math.sqrt(x))
    while s < k - 1e-12:
        g = s * g + x ** s
        s += 1.0
    return g


def _weyl_bose_tail(beta: float, mu: float, cut: float, d: int) -> float:
    # ∫_cut^∞ dW / (e^{β(λ-μ)} - 1) = Σ_m e^{-mβ(cut-μ)} ∫_0^∞ e^{-mβs} W'(cut+s) ds
    if not math.isfinite(cut):
        return 0.0
    if not cut > mu:
        return math.inf
    k = d / 2
    c = unit_ball_volume(d) * 2 ** k / (2 * math.pi) ** d * k
    total = 0.0
    for m in range(1, 1_000_000):
        rate = m * beta
        inner = _scaled_upper_gamma(k, rate * cut) / rate ** k
        term = math.exp(-rate * (cut - mu)) * c * inner
        total += term
        if term <= 1e-15 * total:
            break
    return total


def occupations(lambda_bar, beta: float, mu: float) -> np.ndarray:
    """Bose-Einstein occupations ``1 / (e^{β(λ̄_j - μ)} - 1)``."""
    lam = np.asarray(lambda_bar, float)
    if not mu < lam[0]:
        raise InvalidParameterError(f"mu={mu} must lie below the lowest level {lam[0]}")
    return 1.0 / np.expm1(beta * (lam - mu))


def _count(lam, beta, s):
    # occupation sum with μ = λ̄1 - s, written in s to keep relative precision near λ̄1
    with np.errstate(over="ignore"):
        return float(np.sum(1.0 / np.expm1(beta * ((lam - lam[0]) + s))))


def solve_mu(lambda_bar, beta: float, rho: float, volume: float) -> float:
    """The unique ``μ < λ̄1`` whose occupations sum to ``rho * volume``.

    Bisection in ``s = λ̄1 - μ`` over ``[guard, Δ]``, with ``Δ`` doubled until the
    count falls below target; ``guard`` is a few ulps of ``λ̄1``.
    """
    lam = np.asarray(lambda_bar, float)
    if lam.size == 0 or not np.all(np.isfinite(lam)):
        raise InvalidParameterError("lambda_bar must be finite and nonempty")
    if np.any(np.diff(lam) < 0):
        raise InvalidParameterError("lambda_bar must be nondecreasing")
    if not beta > 0 or not rho * volume > 0:
        raise InvalidParameterError("need beta > 0 and rho * volume > 0")
    target = rho * volume
    guard = 4 * np.spacing(max(abs(lam[0]), 1e-300))
    top = _count(lam, beta, guard)
    if top < target:
        raise SaturationError(f"{lam.size} levels hold at most {top:.6g} particles, need {target:.6g}",
                              achieved_density=top / volume)
    lo, hi = guard, 1.0 / beta
    while _count(lam, beta, hi) > target:
        lo, hi = hi, 2 * hi
    # count(lo) >= target >= count(hi); the count decreases in s
    for _ in range(4000):
        mid = math.sqrt(lo * hi) if hi > 4 * lo else 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        if _count(lam, beta, mid) > target:
            lo = mid
        else:
            hi = mid
    s = lo if abs(_count(lam, beta, lo) - target) <= abs(_count(lam, beta, hi) - target) else hi
    mu = lam[0] - s
    if not mu < lam[0]:
        mu = float(np.nextafter(lam[0], -math.inf))
    return float(mu)


def truncation_bound(lambda_bar, beta: float, mu: float, volume: float, d: int) -> float:
    """Free-Weyl estimate of the particles held by levels above the computed ones."""
    lam = np.asarray(lambda_bar, float)
    return volume * _weyl_bose_tail(beta, mu, float(lam[-1]), d)


def bec_state(spec: Spectrum, beta: float, rho: float, ell: float) -> BecState:
    lam = modified_spectrum(spec, ell)
    vol = (2 * ell) ** spec.d
    mu = solve_mu(lam, beta, rho, vol)
    occ = occupations(lam, beta, mu)
    return BecState(beta, rho, rho * vol, ell, lam, mu, occ,
                    truncation_bound(lam, beta, mu, vol, spec.d), {"d": spec.d})


def ell_for(N: float, rho: float, d: int) -> float:
    """Half-length with ``rho |B_ell| = N``."""
    return 0.5 * (N / rho) ** (1.0 / d)


def truncated_spectrum(domain, beta: float, rho: float, kmax: int = 4000,
                       seed: int = 0) -> tuple[Spectrum, float, bool]:
    """Grow ``k`` until the Weyl tail under ``μ = λ̄1 - gap/2`` is below ``1e-6 ρ |B|``.

    Only eigenvalues are computed. The first guess for ``k`` is the free Weyl
    count at the level where the tail estimate drops below the tolerance.
    Returns the spectrum, the final tail bound and whether the rule was met
    within ``kmax`` modes. When a dense solve is due anyway the whole
    spectrum is kept and the bound is zero.
    """
    vol, d, n = domain.box.volume, domain.d, domain.n_active
    if n == 0:
        return smallest_eigenpairs(domain, k=1), 0.0, True
    tol = TRUNCATION_RTOL * rho * vol
    low = smallest_eigenpairs(domain, k=min(2, n), seed=seed, vectors=False).eigenvalues
    mu = low[0] - 0.5 * (low[-1] - low[0])
    top = low[-1] + 1.0 / beta
    while vol * _weyl_bose_tail(beta, mu, top, d) >= tol:
        top += 1.0 / beta
    k = min(n, kmax, int(math.ceil(1.1 * vol * free_weyl_count(top, d))) + 8)
    if n <= DENSE_VALUES_MAX and DENSE_VALUES_RATIO * k >= n:
        # the dense path would be taken anyway; one full solve beats regrowing k
        k = n
    while True:
        spec = smallest_eigenpairs(domain, k=max(k, 2) if n > 1 else 1, seed=seed, vectors=False)
        lam = spec.eigenvalues
        mu = lam[0] - 0.5 * (lam[1] - lam[0]) if lam.size > 1 else lam[0]
        bound = 0.0 if lam.size >= n else vol * _weyl_bose_tail(beta, mu, float(lam[-1]), d)
        ok = bound < tol
        if ok or k >= min(kmax, n):
            return spec, bound, ok
        k = min(kmax, n, int(1.4 * k) + 8)


@dataclass
class CondensationRow:
    N: float
    ell: float
    seed: int
    mu: float
    lambda1: float
    lambda2: float
    frac1: float
    frac2: float
    k: int
    tail_bound: float
    truncation_ok: bool
    residual: float


def condensation_task(args) -> CondensationRow:
    rho, beta, N, params, h, i, kmax = args
    d = params.d
    ell = ell_for(N, rho, d)
    box = Box.centered(ell, d)
    cloud = sample_cloud(box.dilated(params.a), params, key=(0xBEC, int(round(N * 1000)), i))
    dom = build_mask(box, cloud, params.a, h)
    spec, bound, ok = truncated_spectrum(dom, beta, rho, kmax=kmax, seed=i)
    st = bec_state(spec, beta, rho, ell)
    lam = st.lambda_bar
    return CondensationRow(N, ell, i, st.mu, float(lam[0]), float(lam[1]) if lam.size > 1 else math.inf,
                           float(st.occupations[0] / N),
                           float(st.occupations[1] / N) if lam.size > 1 else 0.0,
                           int(lam.size), float(bound), bool(ok), st.density_residual)


@dataclass
class CondensationReport:
    rho: float
    beta: float
    rho_c: float | None
    rows: list
    summary: list

    @property
    def theory(self) -> float | None:
        if self.rho_c is None:
            return None
        return max(self.rho - self.rho_c, 0.0) / self.rho

    def medians(self) -> np.ndarray:
        return np.array([s["median_frac1"] for s in self.summary])

    def to_dict(self) -> dict:
        return {"rho": self.rho, "beta": self.beta, "rho_c": self.rho_c, "theory": self.theory,
                "summary": self.summary}


def condensation_experiment(rho: float, beta: float, N_list, params: ModelParams, mc: int,
                            h: float = 0.2, rho_c: float | None = None, kmax: int = 4000,
                            map_fn=map) -> CondensationReport:
    """Condensate fractions over ``mc`` disorder samples for each ``N``."""
    if not (rho > 0 and beta > 0):
        raise InvalidParameterError("rho and beta must be positive")
    N_list = [float(n) for n in N_list]
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise InvalidParameterError("N_list must be increasing")
    tasks = [(rho, beta, N, params, h, i, kmax) for N in N_list for i in range(mc)]
    rows = list(map_fn(condensation_task, tasks))
    summary = []
    for N in N_list:
        sel = [r for r in rows if r.N == N]
        f1 = np.array([r.frac1 for r in sel])
        f2 = np.array([r.frac2 for r in sel])
        summary.append({
            "N": N, "ell": sel[0].ell, "n": len(sel),
            "median_frac1": float(np.median(f1)),
            "q10_frac1": float(np.quantile(f1, 0.1)), "q90_frac1": float(np.quantile(f1, 0.9)),
            "median_frac2": float(np.median(f2)),
            "q10_frac2": float(np.quantile(f2, 0.1)), "q90_frac2": float(np.quantile(f2, 0.9)),
            "truncated": int(sum(not r.truncation_ok for r in sel)),
            "max_residual": float(max(r.residual for r in sel)),
        })
    return CondensationReport(rho, beta, rho_c, rows, summary)
