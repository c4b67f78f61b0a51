"""Acceptance suite: one group of tests per criterion.

Run with ``pytest -m acceptance -v``; a PASS/FAIL line per criterion is
printed in the terminal summary. Numbers measured along the way are attached
as ``measured`` user properties and echoed in that summary.
"""
import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from kacluttinger.bec import (condensation_experiment, critical_density, occupations, solve_mu)
from kacluttinger.cli import main as cli_main
from kacluttinger.deconc import (intervals_regime, rn_weight, rn_weight_from_count, sandwich_check,
                                 scaled_eigenproblem, schedule, target_intervals, u_closed_form,
                                 u_recursive, BlowUp)
from kacluttinger.dos import (DosEstimate, dos_laplace, empirical_dos, extrapolated_laplace,
                              lifshitz_constant, lifshitz_fit)
from kacluttinger.eigen import dense_oracle_eigs, eigenvalues_below, smallest_eigenpairs
from kacluttinger.errors import ScheduleInfeasibleError
from kacluttinger.experiments import box_lambda1_task, gap_task
from kacluttinger.grid import assemble_half_laplacian, build_mask
from kacluttinger.model import Box, ModelParams, sample_cloud, stream, unit_ball_volume
from kacluttinger.spectral import (min_exceeds_frequency, quantile_spec, quantile_t, spectral_gap)

pytestmark = pytest.mark.acceptance

KL = ModelParams(2, 2 / math.pi, 0.3, seed=2024)


def crit(n, title):
    return pytest.mark.criterion(n, title)


def _note(record, text):
    record("measured", text)
    print(text)


def _empty_cloud(box):
    return sample_cloud(box, ModelParams(box.d, 0.0, 0.1))


def _lambda1_refinement(box, cloud, a, h):
    """Relative change of λ1 under halving ``h``: the measured resolution error."""
    l1 = smallest_eigenpairs(build_mask(box, cloud, a, h), 1).lambda1
    l2 = smallest_eigenpairs(build_mask(box, cloud, a, h / 2), 1).lambda1
    return abs(l1 - l2) / l2


# ---------------------------------------------------------------------------
# 1. eigensolver against the dense oracle
# ---------------------------------------------------------------------------

@crit(1, "eigensolver oracle equivalence")
def test_c01_random_domains_match_dense(record_property):
    rng = stream(1, 1)
    worst, done = 0.0, 0
    while done < 50:
        side = rng.uniform(1.5, 3.0)
        box = Box.centered(side / 2, 2)
        h = side / rng.integers(12, 31)
        params = ModelParams(2, rng.uniform(0.5, 3.0), rng.uniform(0.1, 0.35), seed=int(rng.integers(2 ** 32)))
        dom = build_mask(box, sample_cloud(box.dilated(params.a), params), params.a, h)
        if not 6 <= dom.n_active <= 900:
            continue
        op = assemble_half_laplacian(dom)
        got = smallest_eigenpairs(op, 5).eigenvalues
        ref = dense_oracle_eigs(op, 5)
        worst = max(worst, float(np.max(np.abs(got - ref) / ref)))
        done += 1
    _note(record_property, f"max rel err {worst:.2e}")
    assert worst <= 1e-8


@crit(1, "eigensolver oracle equivalence")
def test_c01_four_node_square():
    op = assemble_half_laplacian(build_mask(Box((0, 0), (1, 1)), None, 0.1, 1 / 3))
    assert np.max(np.abs(dense_oracle_eigs(op, 4) - [9, 18, 18, 27])) <= 1e-12
    assert np.max(np.abs(smallest_eigenpairs(op, 4).eigenvalues - [9, 18, 18, 27])) <= 1e-12


# ---------------------------------------------------------------------------
# 2. continuum convergence
# ---------------------------------------------------------------------------

@crit(2, "continuum convergence, Richardson order 2")
def test_c02_richardson_order(record_property):
    unit = Box((0, 0), (1, 1))
    lam = [smallest_eigenpairs(build_mask(unit, None, 0.1, h), 1, tol=1e-12).lambda1 for h in (1 / 16, 1 / 32, 1 / 64)]
    order = math.log2((lam[0] - lam[1]) / (lam[1] - lam[2]))
    extrap = lam[2] + (lam[2] - lam[1]) / 3
    _note(record_property, f"order {order:.4f}, extrapolated {extrap:.7f}")
    assert abs(order - 2.0) <= 0.2
    assert abs(extrap - math.pi ** 2) < 1e-3
    assert abs(lam[2] - math.pi ** 2) < abs(lam[0] - math.pi ** 2)


# ---------------------------------------------------------------------------
# 3. scaling identity
# ---------------------------------------------------------------------------

@crit(3, "scaling identity with matched re-rasterisation")
def test_c03_scaling_identity(record_property):
    D0 = Box.centered(2, 2)
    a, h = 0.3, 0.1
    rng = stream(3, 3)
    worst_l = worst_f = 0.0
    for i in range(100):
        params = ModelParams(2, 1.0, a, seed=3)
        cloud = sample_cloud(D0.dilated(2 * a), params, key=i)
        u = float(rng.uniform(0.01, 0.99))
        res = scaled_eigenproblem(cloud, u, D0, a, h)
        if not math.isfinite(res.lam_orig):
            continue
        eps_h = _lambda1_refinement(D0, cloud, a, h)
        sup = np.max(np.abs(res.spec_scaled.principal_eigenfunction()))
        rl = res.scaling_error / eps_h
        rf = res.eigenfunction_mismatch() / sup / eps_h
        worst_l, worst_f = max(worst_l, rl), max(worst_f, rf)
        assert res.scaling_error <= 10 * eps_h
        assert res.eigenfunction_mismatch() <= 5 * eps_h * sup
    _note(record_property, f"max err/eps_h: eigenvalue {worst_l:.1e}, eigenfunction {worst_f:.1e}")


# ---------------------------------------------------------------------------
# 4. Radon-Nikodym normalisation and change of measure
# ---------------------------------------------------------------------------

GRID4 = [(u, nu, a) for u in (0.2, 0.5, 0.9) for nu in (0.5, 1.0) for a in (0.25, 0.5)]


@crit(4, "Radon-Nikodym normalisation and change of measure")
@pytest.mark.parametrize("u,nu,a", GRID4)
def test_c04_weight_mean_and_change_of_measure(u, nu, a, record_property):
    D0 = Box.centered(1.0, 2)  # |D0| = 4, so d u / |D0| <= 0.45 < log 2
    n = 100_000
    bu = BlowUp.make(u, D0, a)
    lam_d = bu.ratio ** 2
    V = lam_d * bu.D0a_volume          # |λ D0^a|
    ball = unit_ball_volume(2) * a * a  # B(0, a) inside λ D0^a
    rng = stream(4, int(u * 10), int(nu * 10), int(a * 100))
    # Poisson cloud on λ D0^a reduced to the two counts the statistics need
    k_in = rng.poisson(nu * ball, n)
    k_out = rng.poisson(nu * (V - ball), n)
    N = k_in + k_out
    w = rn_weight_from_count(N, u, D0.volume, bu.D0a_volume, nu, 2)
    se = w.std(ddof=1) / math.sqrt(n)
    assert abs(w.mean() - 1) <= 3 * se
    # the same statistics under the ν/λ^d law
    nu2 = nu / lam_d
    k_in2 = rng.poisson(nu2 * ball, n)
    N2 = k_in2 + rng.poisson(nu2 * (V - ball), n)
    for f, f2 in ((N, N2), (k_in == 0, k_in2 == 0)):
        f, f2 = f.astype(float), f2.astype(float)
        lhs, rhs = np.mean(w * f), np.mean(f2)
        se_c = math.hypot(np.std(w * f, ddof=1), np.std(f2, ddof=1)) / math.sqrt(n)
        assert abs(lhs - rhs) <= 3 * se_c
    _note(record_property, f"u={u} nu={nu} a={a}: mean weight {w.mean():.4f} +- {se:.4f}")


@crit(4, "Radon-Nikodym normalisation and change of measure")
def test_c04_geometric_count_matches_poisson_reduction():
    # the point-set weight equals the count formula on real clouds
    D0 = Box.centered(1.0, 2)
    p = ModelParams(2, 1.0, 0.5, seed=41)
    for i in range(200):
        cloud = sample_cloud(D0.dilated(2.0), p, key=i)
        bu = BlowUp.make(0.9, D0, 0.5)
        lamD0 = D0.scaled(bu.ratio)
        count = int(np.count_nonzero(lamD0.distance(cloud.points) < bu.ratio * 0.5)) if len(cloud) else 0
        assert rn_weight(cloud, 0.9, D0, 0.5) == pytest.approx(
            rn_weight_from_count(count, 0.9, 4.0, bu.D0a_volume, 1.0, 2), rel=1e-14)


# ---------------------------------------------------------------------------
# 5. schedule and target intervals
# ---------------------------------------------------------------------------

@crit(5, "schedule recursion and disjoint target intervals")
def test_c05_schedule_and_intervals(record_property):
    import time
    from fractions import Fraction
    t0 = time.perf_counter()
    for s0, cb, cs in ((Fraction(1, 100), Fraction(1), Fraction(3)), (Fraction(3, 1000), Fraction(2), Fraction(5)),
                       (Fraction(1, 7), Fraction(1, 3), Fraction(9, 2))):
        rec = u_recursive(s0, 10, cb, cs)
        assert all(rec[i - 1] == u_closed_form(s0, i, cb, cs) for i in range(1, 11))
    rng = stream(5, 5)
    checked = drawn = 0
    while checked < 1000:
        drawn += 1
        try:
            sched = schedule(float(rng.uniform(1e-4, 0.05)), int(rng.integers(1, 5)),
                             float(rng.uniform(0.5, 2)), float(rng.uniform(1, 8)))
        except ScheduleInfeasibleError:
            continue
        t, eps = float(rng.uniform(0.05, 5)), float(rng.uniform(0, 0.01))
        vol, eta = float(rng.uniform(0.5, 10)), float(rng.uniform(0, 1e-4))
        if not intervals_regime(t, eps, sched, vol, eta):
            continue
        J = target_intervals(t, eps, sched, vol, eta)
        assert all(0 < lo <= hi < t for lo, hi in J)
        assert all(b[1] < a[0] for a, b in zip(J, J[1:]))
        checked += 1
    with pytest.raises(ScheduleInfeasibleError):
        schedule(0.2, 3, 1.0, 3.0)
    _note(record_property, f"{checked} of {drawn} draws in the regime, {time.perf_counter() - t0:.2f} s")
    assert time.perf_counter() - t0 <= 1.0


# ---------------------------------------------------------------------------
# 6. sandwich inequalities
# ---------------------------------------------------------------------------

def _clearing_cloud(D0, centre, radius, a, spacing, rng):
    g = np.arange(D0.lo[0] - 2 * a, D0.hi[0] + 2 * a + 1e-9, spacing)
    pts = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    pts = pts + rng.uniform(-0.1 * spacing, 0.1 * spacing, pts.shape)
    pts = pts[np.linalg.norm(pts - centre, axis=1) > radius + a]
    return _empty_cloud(D0.dilated(3 * a)).with_points(pts)


@crit(6, "sandwich inequalities on constructed clearings")
def test_c06_sandwich(record_property):
    D0 = Box.centered(2.0, 2)
    # fine enough that the discrete φ is small on the thin dilation annuli
    a, h = 0.3, 0.025
    rng = stream(6, 6)
    worst = math.inf
    for i in range(50):
        centre = rng.uniform(-0.2, 0.2, 2)
        cloud = _clearing_cloud(D0, centre, float(rng.uniform(1.2, 1.6)), a, 0.4, rng)
        u = float(rng.uniform(0.05, 0.3))
        rep = sandwich_check(cloud, u, D0, a, h)
        assert rep.hyp1 and rep.hyp2, f"instance {i}: hypotheses fail ({rep.max_outside}, {rep.max_near})"
        eps_h = _lambda1_refinement(D0, cloud, a, h)
        worst = min(worst, rep.slack1 / eps_h, rep.slack2 / eps_h)
        assert rep.slack1 >= -2 * eps_h and rep.slack2 >= -2 * eps_h
    _note(record_property, f"min slack/eps_h {worst:.3g}")


# ---------------------------------------------------------------------------
# 7. DOS cross-validation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def empirical_laplace():
    return extrapolated_laplace(1.0, KL, L=12.0, h=0.2, cut=6.0, n=30)


@crit(7, "DOS cross-validation at t = 1")
def test_c07_laplace_cross_validation(empirical_laplace, record_property):
    emp = empirical_laplace
    mc = dos_laplace(1.0, KL, mc=400)
    tol = 3 * math.hypot(emp.stderr, mc.stderr) + 0.1 * mc.value
    _note(record_property, f"empirical {emp.value:.5f}+-{emp.stderr:.5f}, sausage {mc.value:.5f}+-{mc.stderr:.5f}")
    assert abs(emp.value - mc.value) <= tol


@crit(7, "DOS cross-validation at t = 1")
def test_c07_free_case():
    free = dos_laplace(1.0, ModelParams(2, 0.0, 0.3), mc=100)
    assert abs(free.value - 1 / (2 * math.pi)) <= max(3 * free.stderr, 1e-15)


# ---------------------------------------------------------------------------
# 8. Lifshitz slope
# ---------------------------------------------------------------------------

@crit(8, "Lifshitz slope within 30%")
def test_c08_lifshitz_slope(record_property):
    # large boxes, spectra complete below a low cut: the deep tail of the counting measure
    L, h, cut, n = 24.0, 0.15, 5.0, 20
    box = Box.centered(L / 2, 2)
    spectra = []
    for i in range(n):
        cloud = sample_cloud(box.dilated(KL.a), KL, key=(0x11F, i))
        spec = eigenvalues_below(build_mask(box, cloud, KL.a, h), cut, seed=i)
        spec.meta["volume"] = box.volume
        spectra.append(spec)
    dos = empirical_dos(spectra, grid=np.linspace(0.05, cut, 400), nu=KL.nu)
    fit = lifshitz_fit(dos)
    _note(record_property, f"slope {fit.slope:.3f} vs {fit.theory:.3f} on [{fit.window[0]:.3f}, "
                           f"{fit.window[1]:.3f}] ({fit.relative_error:.1%} off)")
    assert fit.theory == pytest.approx(5.783186, abs=1e-6)
    assert fit.relative_error <= 0.30


@crit(8, "Lifshitz slope within 30%")
def test_c08_synthetic_self_fit():
    lam = np.linspace(0.1, 1.0, 50)
    C = lifshitz_constant(2, KL.nu)
    dos = DosEstimate(lam, np.exp(-C / lam), np.zeros(50), 1, 1.0, "empirical", meta={"d": 2, "nu": KL.nu})
    assert abs(lifshitz_fit(dos).slope - C) <= 1e-6


# ---------------------------------------------------------------------------
# 9. Bose gas
# ---------------------------------------------------------------------------

@crit(9, "Bose gas: chemical potential and condensation trend")
def test_c09_closed_form_and_invariants():
    for Nbar, beta in ((0.5, 1.0), (3.0, 2.0), (1e5, 0.3)):
        mu = solve_mu([1.7], beta, Nbar, 1.0)
        assert abs(mu - (1.7 - math.log1p(1 / Nbar) / beta)) <= 1e-12
    rng = stream(9, 9)
    for _ in range(200):
        lam = np.sort(rng.uniform(0, 10, rng.integers(1, 60)))
        beta, shift = rng.uniform(0.2, 5), rng.uniform(-5, 5)
        mu = lam[0] - rng.uniform(1e-6, 2)
        assert np.max(np.abs(occupations(lam + shift, beta, mu + shift) / occupations(lam, beta, mu) - 1)) <= 1e-9


def _condensation(rho_factor, sizes, rho_c):
    return condensation_experiment(rho_factor * rho_c, 1.0, sizes, KL, mc=6, h=0.2, rho_c=rho_c)


@crit(9, "Bose gas: chemical potential and condensation trend")
def test_c09_condensation_trend(empirical_laplace, record_property):
    rho_c = critical_density(empirical_laplace.dos[0], 1.0)
    above = _condensation(2.0, [10, 20, 40], rho_c)
    below = _condensation(0.5, [2.5, 5, 10], rho_c)
    for rep in (above, below):
        for r in rep.rows:
            assert r.residual <= 1e-9
            if r.lambda2 > r.lambda1:
                assert r.frac2 < r.frac1
    m_above, m_below = above.medians(), below.medians()
    target = above.theory
    _note(record_property, f"rho_c {rho_c:.4f}; above: medians {np.round(m_above, 3).tolist()} "
                           f"target {target:.3f}; below: medians {np.round(m_below, 3).tolist()}")
    assert np.all(np.diff(m_above) > 0)
    assert abs(m_above[-1] - target) <= 0.25 * target
    assert np.all(np.diff(m_below) < 0)


# ---------------------------------------------------------------------------
# 10. resonance frequency against sigma
# ---------------------------------------------------------------------------

@crit(10, "resonance frequency nonincreasing as sigma decreases")
def test_c10_gap_trend(record_property):
    ell, h, n = 8.0, 0.2, 300
    specs = [gap_task((KL, ell, h, 1e-9, i)) for i in range(n)]
    freqs, ses = [], []
    for sigma in (1.0, 0.3, 0.1, 0.03):
        f = float(np.mean([spectral_gap(s, sigma, ell).resonance for s in specs]))
        freqs.append(f)
        ses.append(math.sqrt(f * (1 - f) / n))
    _note(record_property, f"frequencies {np.round(freqs, 4).tolist()}")
    for i in range(3):
        assert freqs[i + 1] <= freqs[i] + 2 * math.hypot(ses[i], ses[i + 1])


# ---------------------------------------------------------------------------
# 11. quantile machinery
# ---------------------------------------------------------------------------

@crit(11, "quantile machinery and minimum-over-boxes frequency bound")
def test_c11_quantile(record_property):
    params = ModelParams(2, 2 / math.pi, 0.5, seed=11)
    h, n_samples, n_trials = 0.2, 200, 100
    qs1 = quantile_spec(1.0, 110.0, 2, params.nu)
    assert qs1.n_boxes_star == 9
    total = n_samples + n_trials * qs1.n_boxes_star
    lam = np.array([box_lambda1_task((params, qs1, h, 1e-9, i)) for i in range(total)])
    samples, trials = lam[:n_samples], lam[n_samples:].reshape(n_trials, qs1.n_boxes_star)
    notes = []
    for G in (1.0, 2.0):
        qs = quantile_spec(G, 110.0, 2, params.nu)
        est = quantile_t(samples, qs, n_boot=1000, seed=11)
        assert est.frac_le >= qs.p and est.frac_lt <= qs.p
        f, se = min_exceeds_frequency(trials, est.t_hat)
        notes.append(f"Gamma={G}: t={est.t_hat:.4f} freq {f:.3f}+-{se:.3f} vs {math.exp(-G):.3f}")
        assert f <= math.exp(-G) + 3 * se
    _note(record_property, "; ".join(notes))


# ---------------------------------------------------------------------------
# 12. determinism across parallel widths
# ---------------------------------------------------------------------------

def _run_cli(args, out):
    code = cli_main(args + ["--out", str(out)])
    assert code == 0, json.loads((out / "manifest.json").read_text())["errors"]
    return {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}


@crit(12, "byte-identical outputs across --jobs widths")
@pytest.mark.parametrize("command,extra", [
    ("gap-sweep", ["--set", "ell=3", "--set", "samples=8", "--set", "sigma=1,0.1"]),
    ("dos", ["--set", "L=4", "--set", "samples=4", "--set", "mc=16", "--set", "steps=32", "--set", "cut=4"]),
    ("bec", ["--set", "rho=0.2", "--set", "rho_c=0.05", "--set", "N_list=2,4", "--set", "mc=3"]),
])
def test_c12_jobs_invariance(command, extra, tmp_path):
    base = [command, "--seed", "77", "--set", "nu=0.6366197723675814"] + extra
    one = _run_cli(base + ["--jobs", "1"], tmp_path / "j1")
    two = _run_cli(base + ["--jobs", "2"], tmp_path / "j2")
    again = _run_cli(base + ["--jobs", "1"], tmp_path / "j1b")
    assert one and one == two == again


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-m", "acceptance"]))
