import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import jn_zeros

from kacluttinger.dos import (DosEstimate, bridge_sausage_volume, bridge_path, dos_laplace,
                              dos_realisation, empirical_dos, free_laplace_tail, free_weyl_count,
                              lifshitz_constant, lifshitz_fit, sausage_volume, write_dos)
from kacluttinger.eigen import Spectrum, eigenvalues_below
from kacluttinger.errors import InsufficientDataError, InvalidParameterError
from kacluttinger.grid import build_mask
from kacluttinger.model import Box, ModelParams, sample_cloud, stream


def _fd_box_eigs(side, h, cut):
    # separable finite-difference spectrum of the half Laplacian on a square
    m = round(side / h) - 1
    i = np.arange(1, m + 1)
    one = (1 - np.cos(i * math.pi / (m + 1))) / h ** 2
    vals = (one[:, None] + one[None, :]).ravel()
    return np.sort(vals[vals <= cut])


def test_free_box_count_matches_lattice():
    side = 20.0
    lam = _fd_box_eigs(side, 0.01, 60.0)
    dos = empirical_dos([(lam, side ** 2, 60.0)], grid=[50.0], d=2, nu=0.0)
    k = np.arange(1, 200)
    lattice = np.count_nonzero((math.pi ** 2 / 2) * (k[:, None] ** 2 + k[None, :] ** 2) / side ** 2 <= 50.0)
    assert dos.cumulative[0] == pytest.approx(lattice / side ** 2, rel=0.02)


def test_empty_realisation_contributes_zero():
    full = empirical_dos([(np.array([1.0, 2.0]), 4.0, 3.0)], grid=[0.5, 1.5, 2.5])
    both = empirical_dos([(np.array([1.0, 2.0]), 4.0, 3.0), Spectrum.infinite(1, 0.1, 2)],
                         grid=[0.5, 1.5, 2.5], volumes=[4.0, 4.0])
    assert both.cumulative == pytest.approx(full.cumulative / 2)


def test_doubling_realisations_shrinks_error():
    rng = stream(1, 2)
    reals = [(np.sort(rng.uniform(0, 5, rng.poisson(20))), 4.0, 5.0) for _ in range(800)]
    a = empirical_dos(reals[:400], grid=[2.5])
    b = empirical_dos(reals, grid=[2.5])
    assert b.stderr[0] / a.stderr[0] == pytest.approx(1 / math.sqrt(2), rel=0.3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 10), max_size=20), min_size=1, max_size=6))
def test_cumulative_nondecreasing(samples):
    dos = empirical_dos([(np.array(s), 2.0, 10.0) for s in samples], grid=np.linspace(0, 10, 41))
    assert dos.cumulative[0] == 0 or min(min(s, default=1) for s in samples) == 0
    assert np.all(np.diff(dos.cumulative) >= -1e-15)


def test_laplace_from_atoms_exact():
    dos = empirical_dos([(np.array([1.0, 2.0]), 2.0, 5.0), (np.array([3.0]), 1.0, 5.0)])
    val, _ = dos.laplace(0.5)
    assert val == pytest.approx(0.5 * ((math.exp(-0.5) + math.exp(-1)) / 2 + math.exp(-1.5)))


def test_laplace_completely_monotone():
    rng = stream(3, 4)
    dos = empirical_dos([(np.sort(rng.uniform(0.3, 6, 15)), 3.0, 6.0) for _ in range(20)])
    ts = np.linspace(0.5, 3, 11)
    f = np.array([dos.laplace(t)[0] for t in ts])
    for order in range(1, 4):
        diff = np.diff(f, n=order)
        assert np.all((-1) ** order * diff >= -1e-15)


def test_bridge_endpoints_pinned():
    for seed in range(5):
        s = bridge_sausage_volume(1.0, 0.3, 2, steps=64, seed=seed)
        assert np.all(s.path[0] == 0) and np.all(s.path[-1] == 0)


def test_bridge_variance():
    rng = stream(0, 9)
    mids = np.array([bridge_path(2.0, 2, 8, rng)[4] for _ in range(4000)])
    # bridge variance at the midpoint is t/4 per coordinate
    assert mids.var(axis=0) == pytest.approx([0.5, 0.5], rel=0.08)


def test_short_time_sausage_is_ball():
    s = bridge_sausage_volume(1e-4, 1.0, 2, steps=64)
    assert s.sausage_volume == pytest.approx(math.pi, rel=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.05, 3))
def test_sausage_contains_ball(seed, t):
    s = bridge_sausage_volume(t, 0.4, 2, steps=32, seed=seed)
    assert s.sausage_volume >= math.pi * 0.16 - 1e-12


def test_sausage_grows_with_time():
    path = bridge_path(1.0, 2, 256, stream(5))
    vols = [sausage_volume(path[:j], 0.3, 0.3 / 16, offset=[0.3, 0.7]) for j in range(2, 257, 16)]
    assert np.all(np.diff(vols) >= 0)


def test_sausage_volume_of_segment():
    path = np.array([[0.0, 0.0], [2.0, 0.0]])
    # stadium: rectangle plus disc
    assert sausage_volume(path, 0.5, 0.01) == pytest.approx(2 * 1.0 + math.pi * 0.25, rel=2e-3)


def test_bridge_rejects_bad_input():
    with pytest.raises(InvalidParameterError):
        bridge_sausage_volume(0.0, 0.3, 2)
    with pytest.raises(InvalidParameterError):
        bridge_sausage_volume(1.0, 0.3, 2, steps=1)


def test_laplace_free_case():
    est = dos_laplace(1.0, ModelParams(2, 0.0, 0.3))
    assert est.value == pytest.approx(1 / (2 * math.pi), abs=1e-15)


def test_laplace_decreasing_in_nu():
    vals = [dos_laplace(1.0, ModelParams(2, nu, 0.3, seed=2), mc=30, steps=64).value for nu in (0.0, 0.5, 1.0)]
    assert vals[0] > vals[1] > vals[2]


def test_laplace_matches_free_weyl():
    # the Laplace transform of the free Weyl measure is (2 pi t)^{-d/2}
    for d in (2, 3):
        assert free_laplace_tail(1.3, d, 0.0) == pytest.approx((2 * math.pi * 1.3) ** (-d / 2), rel=1e-12)
    assert free_weyl_count(2 * math.pi, 2) == pytest.approx(1.0)


def test_lifshitz_constant_d2():
    j = jn_zeros(0, 1)[0]
    assert lifshitz_constant(2, 2 / math.pi) == pytest.approx(j * j, rel=1e-12)
    assert lifshitz_constant(2, 2 / math.pi) == pytest.approx(5.783186, abs=1e-6)


@pytest.mark.parametrize("d,C", [(2, 3.0), (3, 7.5)])
def test_lifshitz_synthetic(d, C):
    lam = np.linspace(0.2, 2.0, 40)
    dos = DosEstimate(lam, np.exp(-C * lam ** (-d / 2)), np.zeros(40), 1, 1.0, "empirical", meta={"d": d})
    fit = lifshitz_fit(dos, (0.2, 2.0), nu=1.0)
    assert fit.slope == pytest.approx(C, abs=1e-6)


def test_lifshitz_refuses_without_obstacles():
    lam = np.linspace(0, 5, 20)
    dos = DosEstimate(lam, free_weyl_count(lam, 2), np.zeros(20), 1, 1.0, "empirical", meta={"d": 2, "nu": 0.0})
    with pytest.raises(InsufficientDataError):
        lifshitz_fit(dos)


def test_lifshitz_reports_usable_range():
    lam = np.linspace(0, 5, 20)
    M = np.where(lam > 4.5, 1e-3, 0.0)
    dos = DosEstimate(lam, M, np.zeros(20), 1, 1.0, "empirical", meta={"d": 2, "nu": 1.0})
    with pytest.raises(InsufficientDataError) as info:
        lifshitz_fit(dos)
    assert info.value.usable_range is not None


def _small_spectra(keys):
    p = ModelParams(2, 2 / math.pi, 0.3, seed=7)
    box = Box.centered(3, 2)
    out = []
    for i in keys:
        cloud = sample_cloud(box.dilated(0.3), p, key=i)
        spec = eigenvalues_below(build_mask(box, cloud, 0.3, 0.2), 3.0)
        spec.meta["volume"] = box.volume
        out.append(spec)
    return out


def test_disjoint_seed_ranges_agree():
    grid = np.linspace(0.5, 3.0, 6)
    a = empirical_dos(_small_spectra(range(0, 40)), grid=grid)
    b = empirical_dos(_small_spectra(range(40, 80)), grid=grid)
    se = np.hypot(a.stderr, b.stderr)
    assert np.all(np.abs(a.cumulative - b.cumulative) <= 3 * se + 1e-15)


def test_realisation_task_is_deterministic():
    p = ModelParams(2, 2 / math.pi, 0.3, seed=1)
    r1 = dos_realisation((p, 4.0, (0.4,), 3.0, 2))
    r2 = dos_realisation((p, 4.0, (0.4,), 3.0, 2))
    assert np.array_equal(r1["full"][0].eigenvalues, r2["full"][0].eigenvalues)
    assert len(r1["sub"][0]) == 4


def test_write_dos(tmp_path):
    dos = empirical_dos([(np.array([1.0]), 1.0, 2.0)], grid=[0.5, 1.5])
    lines = write_dos(dos, tmp_path / "dos.csv").read_text().splitlines()
    assert lines[0] == "lambda,cumulative,stderr,n" and len(lines) == 3
