"""Density of states: empirical eigenvalue counting, the Brownian-bridge
Wiener-sausage representation of its Laplace transform, and Lifshitz-tail fits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree
from scipy.special import gammaincc

from .eigen import Spectrum, eigenvalues_below
from .errors import InsufficientDataError, InvalidParameterError
from .grid import build_mask
from .model import Box, ModelParams, ball_eigenvalue, sample_cloud, stream, unit_ball_volume


@dataclass
class DosEstimate:
    """Cumulative mass ``M(λ)`` of a nonnegative measure on ``[0, ∞)`` on a grid.

    For the empirical kind, ``atoms`` keeps each realisation's eigenvalues,
    normalising volume and completeness cut so transforms can be taken exactly.
    ``valid_below`` bounds the range where truncated spectra are complete.
    """

    lambdas: np.ndarray
    cumulative: np.ndarray
    stderr: np.ndarray
    n: int
    volume: float
    kind: str
    valid_below: float = math.inf
    atoms: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def laplace(self, t: float) -> tuple[float, float]:
        """``(∫ e^{-tλ} dm, standard error)`` over realisations.

        Exact sum over the stored atoms when available, otherwise integration
        by parts on the tabulated cumulative mass.
        """
        if not t > 0:
            raise InvalidParameterError("t must be positive")
        if self.atoms:
            # only realisations complete up to the common cut enter the transform
            vals = np.array([np.sum(np.exp(-t * lam)) / vol for lam, vol, cut in self.atoms
                             if cut >= self.valid_below])
            se = vals.std(ddof=1) / math.sqrt(vals.size) if vals.size > 1 else math.nan
            return float(vals.mean()), float(se)
        lam, M = self.lambdas, self.cumulative
        # ∫ e^{-tλ} dM = e^{-tλ_max} M(λ_max) + t ∫ e^{-tλ} M dλ
        integral = trapezoid(np.exp(-t * lam) * M, lam)
        val = math.exp(-t * lam[-1]) * M[-1] + t * integral
        return float(val), math.nan

    def weyl_tail(self, t: float) -> float:
        """Bound on the Laplace mass missed above ``valid_below`` (free Weyl density)."""
        if not math.isfinite(self.valid_below):
            return 0.0
        d = int(self.meta.get("d", 2))
        return free_laplace_tail(t, d, self.valid_below)


def free_weyl_count(lam, d: int):
    """Weyl term ``ω_d (2λ)^{d/2} / (2π)^d`` of the free counting function per volume."""
    lam = np.maximum(np.asarray(lam, float), 0.0)
    return unit_ball_volume(d) * (2 * lam) ** (d / 2) / (2 * math.pi) ** d


def free_laplace_tail(t: float, d: int, cut: float) -> float:
    """``∫_cut^∞ e^{-tλ} dW(λ)`` for the Weyl term W, by the regularised gamma function."""
    k = d / 2
    c = unit_ball_volume(d) * 2 ** k / (2 * math.pi) ** d * k
    # ∫_cut^∞ e^{-tλ} λ^{k-1} dλ = Γ(k) Q(k, t cut) / t^k
    return float(c * math.gamma(k) * gammaincc(k, t * cut) / t ** k)


def _realisation(item, vol=None):
    if isinstance(item, Spectrum):
        spec = item
        vol = spec.meta.get("volume") if vol is None else vol
        if vol is None:
            if spec.domain is None:
                raise InvalidParameterError("spectrum has no domain; pass volumes explicitly")
            vol = spec.domain.box.volume
        if spec.is_empty:
            return np.zeros(0), float(vol), math.inf, spec.d
        lam = np.asarray(spec.eigenvalues, float)
        cut = float(spec.meta.get("cut", lam[-1]))
        return lam[lam <= cut], float(vol), cut, spec.d
    lam = np.asarray(item[0], float)
    vol = item[1] if vol is None else vol
    lam = lam[np.isfinite(lam)]
    cut = float(item[2]) if len(item) > 2 else (float(lam[-1]) if lam.size else math.inf)
    return lam, float(vol), cut, None


def empirical_dos(spectra, grid=None, volumes=None, d: int | None = None,
                  nu: float | None = None) -> DosEstimate:
    """Averaged normalised counting function ``#{λ_j <= λ} / |B|`` over realisations.

    ``spectra`` holds :class:`Spectrum` objects or ``(eigenvalues, volume[, cut])``
    tuples. Empty realisations contribute the zero measure. Realisations may
    be complete up to different cuts; at each grid value only those complete
    there are averaged (``meta["n_per_point"]``).
    """
    items = list(spectra)
    if not items:
        raise InvalidParameterError("need at least one realisation")
    atoms = []
    for i, it in enumerate(items):
        lam, vol, cut, dd = _realisation(it, None if volumes is None else float(volumes[i]))
        if dd is not None:
            d = d or dd
        atoms.append((np.sort(lam), vol, cut))
    cuts = np.array([c for _, _, c in atoms])
    finite = cuts[np.isfinite(cuts)]
    valid = float(finite.max()) if finite.size else math.inf
    if grid is None:
        top = valid if math.isfinite(valid) else max((a[0][-1] for a in atoms if a[0].size), default=1.0)
        grid = np.linspace(0.0, top, 513)
    grid = np.asarray(grid, float)
    per = np.array([np.searchsorted(lam, grid, side="right") / vol for lam, vol, _ in atoms])
    ok = grid[None, :] <= cuts[:, None]
    cnt = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt > 0, (per * ok).sum(axis=0) / np.maximum(cnt, 1), np.nan)
        var = ((per - mean) ** 2 * ok).sum(axis=0) / np.maximum(cnt - 1, 1)
        se = np.where(cnt > 1, np.sqrt(var / np.maximum(cnt, 1)), np.nan)
    vol_mean = float(np.mean([v for _, v, _ in atoms]))
    return DosEstimate(grid, mean, se, len(atoms), vol_mean, "empirical", valid, atoms,
                       {"d": d or 2, "nu": nu, "n_per_point": cnt})


def write_dos(dos: DosEstimate, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "cumulative", "stderr", "n"])
        for lam, m, s in zip(dos.lambdas, dos.cumulative, dos.stderr):
            w.writerow([repr(float(lam)), repr(float(m)), repr(float(s)), dos.n])
    return path


# ---------------------------------------------------------------------------
# Brownian bridge and Wiener sausage
# ---------------------------------------------------------------------------

@dataclass
class BridgeSample:
    """One bridge path and its sausage volume.

    ``volume_coarse`` and ``volume_fine`` are the polygonal sausages through
    ``steps`` and ``2 steps`` points of the same path; ``sausage_volume`` is
    their extrapolation in ``sqrt(dt)`` (the polygonal error decays like
    ``dt^{1/2}``), floored at the volume of the initial ball.
    """

    t: float
    steps: int
    path: np.ndarray
    sausage_volume: float
    resolution: float
    volume_coarse: float = math.nan
    volume_fine: float = math.nan


def bridge_path(t: float, d: int, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Brownian bridge from 0 to 0 on ``[0, t]`` at ``steps + 1`` uniform times.

    A Brownian path ``W`` (covariance ``s I``) is pinned via ``W(s) - (s/t) W(t)``,
    which has exactly the bridge law at the sampled times.
    """
    dt = t / steps
    inc = rng.standard_normal((steps, d)) * math.sqrt(dt)
    W = np.vstack([np.zeros((1, d)), np.cumsum(inc, axis=0)])
    frac = np.arange(steps + 1)[:, None] / steps
    B = W - frac * W[-1]
    B[0] = 0.0
    B[-1] = 0.0
    return B


def _densify(path: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.diff(path, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    nsub = np.maximum(1, np.ceil(lens / spacing).astype(int))
    pieces = [path[:1]]
    for p0, s, n in zip(path[:-1], seg, nsub):
        f = (np.arange(1, n + 1) / n)[:, None]
        pieces.append(p0 + f * s)
    return np.vstack(pieces)


def sausage_volume(path: np.ndarray, a: float, resolution: float, offset=None) -> float:
    """Volume of the closed ``a``-neighbourhood of the polygonal path by cell counting.

    Cell centres ``(i + offset) * resolution`` within distance ``a`` of the
    path are counted (``offset`` defaults to 1/2 in every axis; a uniformly
    random offset makes the count an unbiased volume estimate). The path is
    densified so the point set is within ``resolution / 4`` of the polygon.
    """
    d = path.shape[1]
    off = np.full(d, 0.5) if offset is None else np.asarray(offset, float)
    pts = _densify(path, resolution / 2)
    tree = cKDTree(pts)
    lo = np.floor((pts.min(axis=0) - a) / resolution).astype(int) - 1
    hi = np.ceil((pts.max(axis=0) + a) / resolution).astype(int) + 1
    axes = [(np.arange(lo[k], hi[k] + 1) + off[k]) * resolution for k in range(d)]
    count = 0
    # sweep slabs along the first axis to bound memory
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), -1).reshape(-1, d - 1)
    xmin, xmax = pts[:, 0].min(), pts[:, 0].max()
    for x0 in axes[0]:
        if x0 < xmin - a or x0 > xmax + a:
            continue
        cells = np.column_stack([np.full(rest.shape[0], x0), rest])
        dist, _ = tree.query(cells, distance_upper_bound=a * (1 + 1e-12))
        count += int(np.count_nonzero(np.isfinite(dist)))
    return count * resolution ** d


def bridge_sausage_volume(t: float, a: float, d: int, steps: int = 512,
                          resolution: float | None = None, seed: int = 0, key=(),
                          extrapolate: bool = True) -> BridgeSample:
    if not t > 0:
        raise InvalidParameterError("t must be positive")
    if int(steps) != steps or steps < 2:
        raise InvalidParameterError("steps must be an integer >= 2")
    if not a > 0:
        raise InvalidParameterError("a must be positive")
    res = a / 16 if resolution is None else float(resolution)
    if isinstance(key, (int, np.integer)):
        key = (key,)
    rng = stream(seed, 0xB81D, *key)
    steps = int(steps)
    fine = bridge_path(t, d, 2 * steps, rng)
    offset = rng.random(d)
    path = fine[::2]
    v1 = sausage_volume(path, a, res, offset)
    ball = unit_ball_volume(d) * a ** d
    if not extrapolate:
        return BridgeSample(t, steps, path, max(v1, ball), res, v1, math.nan)
    v2 = sausage_volume(fine, a, res, offset)
    v = v2 + (v2 - v1) / (math.sqrt(2) - 1)
    return BridgeSample(t, steps, path, max(v, ball), res, v1, v2)


@dataclass
class LaplaceEstimate:
    t: float
    value: float
    stderr: float
    n: int
    volumes: np.ndarray | None = None


def dos_laplace(t: float, params: ModelParams, mc: int = 1000, steps: int = 512,
                resolution: float | None = None, map_fn=map,
                extrapolate: bool = True) -> LaplaceEstimate:
    """``(2πt)^{-d/2} E[exp(-ν |W_t^a|)]`` over ``mc`` independent bridges."""
    if not t > 0:
        raise InvalidParameterError("t must be positive")
    d = params.d
    pref = (2 * math.pi * t) ** (-d / 2)
    if params.nu == 0:
        return LaplaceEstimate(t, pref, 0.0, 0)
    tasks = [(t, params.a, d, steps, resolution, params.seed, i, extrapolate) for i in range(mc)]
    vols = np.array(list(map_fn(_sausage_task, tasks)))
    w = np.exp(-params.nu * vols)
    se = w.std(ddof=1) / math.sqrt(mc) if mc > 1 else math.nan
    return LaplaceEstimate(t, pref * float(w.mean()), pref * float(se), mc, vols)


def _sausage_task(args) -> float:
    t, a, d, steps, res, seed, i, ex = args
    return bridge_sausage_volume(t, a, d, steps, res, seed, key=(i,), extrapolate=ex).sausage_volume


# ---------------------------------------------------------------------------
# Lifshitz tail
# ---------------------------------------------------------------------------

def lifshitz_constant(d: int, nu: float) -> float:
    """``ν ω_d λ_d^{d/2}``."""
    return nu * unit_ball_volume(d) * ball_eigenvalue(d) ** (d / 2)


@dataclass
class LifshitzFit:
    slope: float
    intercept: float
    theory: float
    relative_error: float
    window: tuple
    points: int


def lifshitz_fit(dos: DosEstimate, lambda_window=None, d: int | None = None,
                 nu: float | None = None, min_points: int = 5) -> LifshitzFit:
    """Least-squares slope of ``-log M(λ)`` against ``λ^{-d/2}`` inside the window.

    The default window spans the lowest decade of ``λ`` above the smallest
    grid value where ``M > 0``.
    """
    d = d or int(dos.meta.get("d", 2))
    nu = dos.meta.get("nu") if nu is None else nu
    if nu is not None and nu == 0:
        raise InsufficientDataError("no obstacles: the measure has no Lifshitz tail to fit", None)
    lam, M = np.asarray(dos.lambdas, float), np.asarray(dos.cumulative, float)
    pos = (M > 0) & (lam > 0) & (lam <= dos.valid_below)
    usable = (float(lam[pos].min()), float(lam[pos].max())) if pos.any() else None
    if lambda_window is None:
        if usable is None:
            raise InsufficientDataError("no positive cumulative mass", None)
        lambda_window = (usable[0], 10 * usable[0])
    lo, hi = lambda_window
    sel = pos & (lam >= lo) & (lam <= hi)
    if np.count_nonzero(sel) < min_points:
        raise InsufficientDataError(
            f"{int(np.count_nonzero(sel))} positive points in window [{lo}, {hi}], need {min_points}",
            usable)
    x = lam[sel] ** (-d / 2)
    y = -np.log(M[sel])
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    theory = lifshitz_constant(d, nu) if nu else math.nan
    rel = abs(slope - theory) / theory if nu else math.nan
    return LifshitzFit(float(slope), float(icpt), theory, rel, (float(lo), float(hi)),
                       int(np.count_nonzero(sel)))


# ---------------------------------------------------------------------------
# empirical Laplace transform with box-size and grid-spacing extrapolation
# ---------------------------------------------------------------------------

def _quarter_boxes(box: Box) -> list[Box]:
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    mid = 0.5 * (lo + hi)
    out = []
    for corner in np.ndindex(*(2,) * box.d):
        c = np.array(corner)
        out.append(Box(tuple(np.where(c, mid, lo)), tuple(np.where(c, hi, mid))))
    return out


def _spectrum_below(box: Box, cloud, a: float, h: float, cut: float, seed: int) -> Spectrum:
    dom = build_mask(box, cloud, a, h)
    guess = int(0.7 * box.volume * free_weyl_count(cut, box.d)) + 8
    spec = eigenvalues_below(dom, cut, k0=guess, seed=seed)
    spec.meta["volume"] = box.volume
    return spec


def dos_realisation(args) -> dict:
    """Spectra below ``cut`` of one cloud in the box of side ``L`` and its ``2^d``
    half-side sub-boxes, at each grid spacing in ``hs``."""
    params, L, hs, cut, i = args
    box = Box.centered(L / 2, params.d)
    cloud = sample_cloud(box.dilated(params.a), params, key=(0xD05, i))
    out = {"full": [], "sub": []}
    for h in hs:
        out["full"].append(_spectrum_below(box, cloud, params.a, h, cut, i))
        out["sub"].append([_spectrum_below(b, cloud, params.a, h, cut, i) for b in _quarter_boxes(box)])
    return out


@dataclass
class ExtrapolatedLaplace:
    """Empirical ``∫ e^{-tλ} dm`` extrapolated to zero spacing and infinite box.

    ``table[j]`` holds per-realisation transforms for spacing ``hs[j]``:
    column 0 the full box, column 1 the mean over the half-side sub-boxes.
    """

    t: float
    value: float
    stderr: float
    hs: tuple
    L: float
    cut: float
    table: np.ndarray
    per_realisation: np.ndarray
    dos: list

    def raw(self, j: int = -1) -> tuple[float, float]:
        col = self.table[:, j, 0]
        return float(col.mean()), float(col.std(ddof=1) / math.sqrt(col.size))


def _transform(spec: Spectrum, t: float, d: int) -> float:
    lam = spec.eigenvalues[spec.eigenvalues <= spec.meta["cut"]] if not spec.is_empty else np.zeros(0)
    return float(np.sum(np.exp(-t * lam)) / spec.meta["volume"] + free_laplace_tail(t, d, spec.meta["cut"]))


def extrapolated_laplace(t: float, params: ModelParams, L: float = 12.0, h: float = 0.2,
                         cut: float = 6.0, n: int = 30, map_fn=map) -> ExtrapolatedLaplace:
    """Empirical Laplace transform corrected for the two leading finite-size biases.

    Each realisation is solved in a box of side ``L`` and in its half-side
    sub-boxes, at spacings ``h`` and ``h/2``. The Dirichlet box wall lowers the
    transform by a term proportional to ``1/L`` and node-centre rasterisation
    shrinks the obstacles by ``O(h)``; both are removed by first-order
    Richardson steps, ``2 E(L) - E(L/2)`` and then ``2 E(h/2) - E(h)``. Above
    ``cut`` the free Weyl term is added.
    """
    if not t > 0:
        raise InvalidParameterError("t must be positive")
    if n < 2:
        raise InvalidParameterError("need at least two realisations")
    hs = (float(h), float(h) / 2)
    d = params.d
    results = list(map_fn(dos_realisation, [(params, L, hs, cut, i) for i in range(n)]))
    table = np.array([[[_transform(r["full"][j], t, d),
                        np.mean([_transform(s, t, d) for s in r["sub"][j]])] for j in range(2)]
                      for r in results])
    box_ex = 2 * table[:, :, 0] - table[:, :, 1]
    per = 2 * box_ex[:, 1] - box_ex[:, 0]
    dos = [empirical_dos([r["full"][j] for r in results], d=d, nu=params.nu) for j in range(2)]
    return ExtrapolatedLaplace(t, float(per.mean()), float(per.std(ddof=1) / math.sqrt(n)), hs,
                               float(L), float(cut), table, per, dos)
