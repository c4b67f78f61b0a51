"""Per-box spectral observables: gap and resonance, the low quantile of λ1 over
L0-boxes, localisation of the principal eigenfunction, and Fraenkel asymmetry."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .eigen import Spectrum, smallest_eigenpairs
from .errors import EmptyDomainError, InvalidParameterError
from .grid import GridDomain
from .model import Box, constants, stream, unit_ball_volume, ball_eigenvalue

INTERIOR_RULES = ("compact", "wide")


def log_scale(ell: float) -> float:
    if not ell > 1:
        raise InvalidParameterError(f"ell must exceed 1, got {ell}")
    return math.log(ell)


def resonance_threshold(sigma: float, ell: float, d: int) -> float:
    """``σ (log ℓ)^-(1 + 2/d)``."""
    return sigma * log_scale(ell) ** -(1 + 2 / d)


@dataclass
class GapRecord:
    ell: float
    lambda1: float
    lambda2: float
    gap: float
    sigma: float
    threshold: float
    resonance: bool


def spectral_gap(spec: Spectrum, sigma: float, ell: float) -> GapRecord:
    """Gap ``λ2 - λ1`` and the resonance flag ``λ1 < ∞ and gap < threshold``."""
    thr = resonance_threshold(sigma, ell, spec.d)
    if spec.is_empty:
        return GapRecord(ell, math.inf, math.inf, math.nan, sigma, thr, False)
    if spec.k < 2:
        raise InvalidParameterError("gap needs at least two eigenvalues")
    l1, l2 = float(spec.eigenvalues[0]), float(spec.eigenvalues[1])
    gap = max(l2 - l1, 0.0)
    return GapRecord(ell, l1, l2, gap, sigma, thr, bool(gap < thr))


# ---------------------------------------------------------------------------
# L0-box geometry and the quantile level
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuantileSpec:
    Gamma: float
    ell: float
    d: int
    nu: float
    sigma: float
    L0: float
    n_boxes: int
    n_boxes_star: int
    c_hat: float
    s_ell: float
    delta_ell: float
    eta_hat: float
    eta_ell: float
    rho_ell: float
    eps_ell: float
    interior_side: float
    t_ell: float | None = None

    @property
    def p(self) -> float:
        return self.Gamma / self.n_boxes_star if self.n_boxes_star else math.inf

    @property
    def unit(self) -> float:
        """Lattice unit ``(log ℓ)^{1/d}`` of the box centres."""
        return log_scale(self.ell) ** (1 / self.d)

    def box(self, q=None) -> Box:
        """Open L0-box centred at ``q (log ℓ)^{1/d}``."""
        c = np.zeros(self.d) if q is None else np.asarray(q, float) * self.unit
        return Box.centered(self.L0 / 2, self.d, c)

    def interior(self, q=None) -> Box:
        """Closed concentric interior box (stored as its corner coordinates)."""
        c = np.zeros(self.d) if q is None else np.asarray(q, float) * self.unit
        return Box.centered(self.interior_side / 2, self.d, c)

    def star_centres(self) -> np.ndarray:
        """Integer labels ``q`` of the boxes in the sparse, well-separated subfamily."""
        R0 = constants(self.d, self.nu).R0
        step = 20 * (math.ceil(R0) + 1)
        jmax = _max_index(self.ell, self.L0, self.unit * step)
        js = np.arange(-jmax, jmax + 1)
        grids = np.meshgrid(*([js] * self.d), indexing="ij")
        return step * np.stack([g.ravel() for g in grids], axis=1)


def _max_index(ell: float, L0: float, spacing: float) -> int:
    # |q| spacing + L0/2 <= ell, with a little slack for round-off
    room = (ell - L0 / 2) / spacing
    return int(math.floor(room + 1e-12)) if room >= 0 else -1


def quantile_spec(Gamma: float, ell: float, d: int, nu: float, sigma: float = 1.0,
                  eta_hat: float | None = None, L0: float | None = None,
                  interior_rule: str = "compact") -> QuantileSpec:
    """Geometry and scales attached to the quantile level ``Γ / |Ĉ*|``.

    ``interior_rule`` selects the side of the interior box: ``"compact"`` is
    ``(2⌈R0⌉ + 4)(log ℓ)^{1/d}`` and ``"wide"`` is ``2(⌈R0⌉ + 4)(log ℓ)^{1/d}``.
    """
    if not Gamma > 0:
        raise InvalidParameterError("Gamma must be positive")
    if not sigma > 0:
        raise InvalidParameterError("sigma must be positive")
    if interior_rule not in INTERIOR_RULES:
        raise InvalidParameterError(f"interior_rule must be one of {INTERIOR_RULES}")
    if eta_hat is None:
        eta_hat = 1 / (2 * d)
    if not 0 < eta_hat < 1 / d:
        raise InvalidParameterError("eta_hat must lie in (0, 1/d)")
    c = constants(d, nu)
    lg = log_scale(ell)
    unit = lg ** (1 / d)
    ceil_R0 = math.ceil(c.R0)
    if L0 is None:
        L0 = 10 * (ceil_R0 + 1) * unit
    if not L0 > 0:
        raise InvalidParameterError("L0 must be positive")
    side = (2 * ceil_R0 + 4) * unit if interior_rule == "compact" else 2 * (ceil_R0 + 4) * unit
    if side > L0:
        raise InvalidParameterError("interior box does not fit in the L0-box")
    j_all = _max_index(ell, L0, unit)
    j_star = _max_index(ell, L0, unit * 20 * (ceil_R0 + 1))
    n_all = (2 * j_all + 1) ** d if j_all >= 0 else 0
    n_star = (2 * j_star + 1) ** d if j_star >= 0 else 0
    delta = lg ** -(2 + 2 / d)
    eta = math.exp(-lg ** eta_hat)
    rho = sigma * lg ** -(1 + 2 / d)
    return QuantileSpec(
        Gamma=float(Gamma), ell=float(ell), d=int(d), nu=float(nu), sigma=float(sigma),
        L0=float(L0), n_boxes=n_all, n_boxes_star=n_star,
        c_hat=float((40 * (ceil_R0 + 1)) ** d),
        s_ell=d * math.pi ** 2 / (2 * L0 ** 2),
        delta_ell=delta, eta_hat=float(eta_hat), eta_ell=eta, rho_ell=rho,
        eps_ell=rho + delta + eta, interior_side=side,
    )


@dataclass
class QuantileEstimate:
    t_hat: float
    ci_lo: float
    ci_hi: float
    p: float
    n: int
    rank: int
    frac_le: float
    frac_lt: float
    s_ell: float | None = None
    below_free: bool = False


def order_rank(p: float, n: int) -> int:
    """1-based rank ``⌈p n⌉`` of the order statistic used as the p-quantile."""
    return max(1, math.ceil(round(p * n, 9)))


def quantile_t(samples, spec: QuantileSpec | float, n_boot: int = 1000, seed: int = 0,
               min_samples: int = 100, level: float = 0.95) -> QuantileEstimate:
    """Empirical ``inf{t : P[λ1 <= t] >= p}`` as the ``⌈p n⌉``-th order statistic.

    ``spec`` is a :class:`QuantileSpec` (``p = Γ / |Ĉ*|``) or ``p`` itself.
    Infinite sentinels sort above every finite value. The interval is a
    percentile bootstrap of the same order statistic.
    """
    x = np.asarray(samples, dtype=float)
    p = spec.p if isinstance(spec, QuantileSpec) else float(spec)
    if not 0 < p < 1:
        raise InvalidParameterError(f"quantile level must lie in (0, 1), got {p}")
    n = x.size
    if n < min_samples:
        raise InvalidParameterError(f"need at least {min_samples} samples, got {n}")
    if np.isnan(x).any():
        raise InvalidParameterError("samples contain NaN")
    r = order_rank(p, n)
    xs = np.sort(x)
    t = float(xs[r - 1])
    rng = stream(seed, 0xB007)
    boot = np.sort(x[rng.integers(0, n, size=(n_boot, n))], axis=1)[:, r - 1]
    boot.sort()
    alpha = (1 - level) / 2
    lo = float(boot[int(math.floor(alpha * (n_boot - 1)))])
    hi = float(boot[int(math.ceil((1 - alpha) * (n_boot - 1)))])
    est = QuantileEstimate(t, lo, hi, p, n, r, float(np.mean(x <= t)), float(np.mean(x < t)))
    if isinstance(spec, QuantileSpec):
        est.s_ell = spec.s_ell
        est.below_free = bool(t < spec.s_ell)
        if est.below_free:
            warnings.warn("quantile estimate lies below the free-box eigenvalue", RuntimeWarning)
    return est


def min_exceeds_frequency(trials: np.ndarray, t_hat: float) -> tuple[float, float]:
    """Frequency (and its standard error) of ``min_boxes λ1 > t_hat`` over rows of ``trials``."""
    hit = np.min(np.asarray(trials, float), axis=1) > t_hat
    f = float(hit.mean())
    return f, math.sqrt(max(f * (1 - f), 0.0) / hit.size)


# ---------------------------------------------------------------------------
# eigenfunction localisation
# ---------------------------------------------------------------------------

@dataclass
class LocalizationResult:
    max_outside: float
    threshold: float
    passed: bool


def localization_check(spec: Spectrum, d0: Box, d0_int: Box, eta) -> LocalizationResult:
    """Largest ``|φ1|`` over active nodes of ``D0`` outside the closed interior box.

    ``eta`` is the threshold, or a :class:`QuantileSpec` whose ``eta_ell`` is used.
    """
    if not d0.contains_box(d0_int):
        raise InvalidParameterError("interior box is not contained in D0")
    thr = eta.eta_ell if isinstance(eta, QuantileSpec) else float(eta)
    if spec.is_empty:
        return LocalizationResult(0.0, thr, True)
    if spec.domain is None:
        raise InvalidParameterError("spectrum carries no domain")
    phi = spec.principal_eigenfunction()
    xyz = spec.domain.coordinates()
    out = ~d0_int.contains(xyz, closed=True)
    m = float(np.max(np.abs(phi[out]))) if out.any() else 0.0
    return LocalizationResult(m, thr, bool(m <= thr))


# ---------------------------------------------------------------------------
# Fraenkel asymmetry
# ---------------------------------------------------------------------------

@dataclass
class FraenkelResult:
    A: float
    center: np.ndarray
    radius: float
    fk_deficit: float
    lambda1: float
    volume: float


def _best_center(tree: cKDTree, cands: np.ndarray, r: float):
    counts = tree.query_ball_point(cands, r, return_length=True)
    best = counts.max()
    tied = cands[counts == best]
    order = np.lexsort(tied.T[::-1])
    return tied[order[0]], int(best)


def fraenkel_asymmetry(domain: GridDomain, lambda1: float | None = None,
                       stride: int | None = None) -> FraenkelResult:
    """``A = min_B |U Δ B| / |B|`` over balls with ``|B| = |U|``, volumes as node counts.

    Since ``|B| = |U|``, ``|U Δ B| = 2(|U| - |U ∩ B|)``: the search maximises
    the number of active nodes inside a ball of the equal-volume radius. Centres
    are scanned on a coarse sub-lattice, then refined on the node lattice and at
    quarter-node offsets; ties go to the smallest centre lexicographically.
    """
    n = domain.n_active
    if n == 0:
        raise EmptyDomainError("asymmetry of an empty domain is undefined")
    d, h = domain.d, domain.h
    vol = n * h ** d
    r = (vol / unit_ball_volume(d)) ** (1 / d)
    pts = domain.coordinates()
    tree = cKDTree(pts)
    s = stride or max(1, int(round(r / (4 * h))))
    coarse = np.stack(np.meshgrid(*[ax[::s] for ax in domain.axes], indexing="ij"), -1).reshape(-1, d)
    # keep ball boundary effects honest: the radius test is closed
    rr = r * (1 + 1e-12)
    c, _ = _best_center(tree, coarse, rr)
    for step in (h, h / 4):
        span = s * h if step == h else h
        m = int(round(span / step))
        offs = np.arange(-m, m + 1) * step
        local = np.stack(np.meshgrid(*([offs] * d), indexing="ij"), -1).reshape(-1, d) + c
        c, best = _best_center(tree, local, rr)
    A = 2.0 * (1.0 - best / n)
    if lambda1 is None:
        lambda1 = smallest_eigenpairs(domain, 1).lambda1
    fk = lambda1 * (vol / unit_ball_volume(d)) ** (2 / d) / ball_eigenvalue(d) - 1.0
    return FraenkelResult(float(A), np.asarray(c), float(r), float(fk), float(lambda1), float(vol))


def fit_fk_constant(A, deficit) -> float:
    """Largest ``c2`` with ``deficit >= c2 A^2`` on every sample having ``A > 0``."""
    A = np.asarray(A, float)
    deficit = np.asarray(deficit, float)
    keep = A > 0
    if not keep.any():
        raise InvalidParameterError("no sample with positive asymmetry")
    return float(np.min(deficit[keep] / A[keep] ** 2))
