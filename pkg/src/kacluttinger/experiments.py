"""Experiment drivers behind the command line: outputs, manifests and plot scripts.

Every driver builds its list of independent tasks up front, maps them (in
parallel when ``jobs > 1``) and merges the results by task index, so the
numeric outputs do not depend on the worker count.
"""
from __future__ import annotations

import contextlib
import csv
import json
import math
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bec import condensation_experiment, critical_density
from .config import Config, ConfigError
from .deconc import deconcentration_experiment, schedule
from .dos import dos_laplace, extrapolated_laplace, lifshitz_fit, write_dos
from .eigen import smallest_eigenpairs, write_spectrum
from .errors import (ConvergenceError, DivergenceError, InsufficientDataError, InvalidParameterError,
                     KLError, RegimeViolationError, SaturationError, ScheduleInfeasibleError,
                     SizeGuardError)
from .grid import build_mask, write_domain
from .model import Box, constants, sample_cloud, write_cloud
from .spectral import min_exceeds_frequency, quantile_spec, quantile_t, spectral_gap

EXIT_OK, EXIT_USAGE, EXIT_REGIME, EXIT_NUMERIC = 0, 1, 2, 3

_REGIME = (ScheduleInfeasibleError, RegimeViolationError, InsufficientDataError, SaturationError)
_NUMERIC = (ConvergenceError, DivergenceError, SizeGuardError)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidParameterError)):
        return EXIT_USAGE
    if isinstance(exc, _REGIME):
        return EXIT_REGIME
    return EXIT_NUMERIC


@contextlib.contextmanager
def task_map(jobs: int):
    """An order-preserving map over ``jobs`` worker processes (plain ``map`` for one)."""
    if jobs <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield lambda fn, tasks: pool.map(fn, list(tasks), chunksize=1)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_json(path: Path, obj) -> Path:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return repr(o)


def write_plot(path: Path, data: str, title: str, xlabel: str, ylabel: str,
               columns: str = "1:2", extra: str = "") -> Path:
    """A gnuplot script drawing ``columns`` of a CSV file."""
    text = (f"# gnuplot script\nset datafile separator ','\nset key autotitle columnhead\n"
            f"set title '{title}'\nset xlabel '{xlabel}'\nset ylabel '{ylabel}'\n{extra}"
            f"plot '{data}' using {columns} with linespoints\npause -1\n")
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# tasks (top level so they pickle)
# ---------------------------------------------------------------------------

def gap_task(args):
    params, ell, h, tol, i = args
    box = Box.centered(ell, params.d)
    cloud = sample_cloud(box.dilated(params.a), params, key=(0x6A9, i))
    return smallest_eigenpairs(build_mask(box, cloud, params.a, h), k=2, tol=tol, seed=i)


def box_lambda1_task(args):
    """λ1 of an independent D0-box realisation (the central L0-box law)."""
    params, qs, h, tol, i = args
    box = qs.box()
    cloud = sample_cloud(box.dilated(params.a), params, key=(0x9A7, i))
    return smallest_eigenpairs(build_mask(box, cloud, params.a, h), k=1, tol=tol, seed=i).lambda1


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def run_constants(cfg: Config, out: Path, map_fn) -> dict:
    c = constants(cfg.d, cfg.nu)
    data = {"d": cfg.d, "nu": cfg.nu, "omega_d": c.omega_d, "lambda_d": c.lambda_d,
            "R0": c.R0, "c0": c.c0, "c1": c.c1}
    write_json(out / "constants.json", data)
    return data


def run_sample(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    box = Box.centered(cfg.ell, cfg.d)
    cloud = sample_cloud(box.dilated(cfg.a), params)
    write_cloud(cloud, out / "cloud.csv")
    return {"points": len(cloud), "region": cloud.region.to_dict()}


def run_spectrum(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    box = Box.centered(cfg.ell, cfg.d)
    cloud = sample_cloud(box.dilated(cfg.a), params)
    dom = build_mask(box, cloud, cfg.a, cfg.h)
    write_domain(dom, out / "domain.rle")
    spec = smallest_eigenpairs(dom, k=cfg.k, tol=cfg.tol, seed=cfg.seed)
    write_spectrum(spec, out / "spectrum.csv")
    write_plot(out / "plot_spectrum.gp", "spectrum.csv", "lowest eigenvalues", "index", "eigenvalue")
    return {"n_active": dom.n_active, "eigenvalues": spec.eigenvalues.tolist()}


def run_gap_sweep(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    tasks = [(params, cfg.ell, cfg.h, cfg.tol, i) for i in range(cfg.samples)]
    specs = list(map_fn(gap_task, tasks))
    summary = {"ell": cfg.ell, "n": len(specs), "sigma": [], "frequency": [], "stderr": []}
    for j, sigma in enumerate(cfg.sigma):
        recs = [spectral_gap(s, sigma, cfg.ell) for s in specs]
        name = "gaps.csv" if len(cfg.sigma) == 1 else f"gaps_sigma{j}.csv"
        write_csv(out / name, ["seed", "lambda1", "lambda2", "gap", "resonance"],
                  [(i, r.lambda1, r.lambda2, r.gap, r.resonance) for i, r in enumerate(recs)])
        f = float(np.mean([r.resonance for r in recs]))
        summary["sigma"].append(sigma)
        summary["frequency"].append(f)
        summary["stderr"].append(math.sqrt(f * (1 - f) / len(recs)))
    write_csv(out / "resonance.csv", ["sigma", "frequency", "stderr"],
              zip(summary["sigma"], summary["frequency"], summary["stderr"]))
    write_json(out / "gap_summary.json", summary)
    write_plot(out / "plot_resonance.gp", "resonance.csv", "resonance frequency", "sigma",
               "frequency", "1:2:3", "set logscale x\n")
    return summary


def quantile_samples(cfg: Config, qs, map_fn) -> tuple[np.ndarray, np.ndarray]:
    """λ1 samples for the quantile and, after them, the trial pool of ``|Ĉ*|``-tuples."""
    params = cfg.params()
    n_star = qs.n_boxes_star
    total = cfg.samples + cfg.trials * n_star
    lam = np.array(list(map_fn(box_lambda1_task, [(params, qs, cfg.h, cfg.tol, i) for i in range(total)])))
    return lam[:cfg.samples], lam[cfg.samples:].reshape(cfg.trials, n_star)


def run_quantile(cfg: Config, out: Path, map_fn) -> dict:
    qs0 = quantile_spec(cfg.Gamma[0], cfg.ell, cfg.d, cfg.nu, cfg.sigma[0], cfg.eta_hat,
                        cfg.L0, cfg.d0_int)
    samples, trials = quantile_samples(cfg, qs0, map_fn)
    write_csv(out / "lambda1_samples.csv", ["index", "lambda1"], enumerate(samples))
    rows, summary = [], {"L0": qs0.L0, "n_boxes_star": qs0.n_boxes_star, "results": []}
    for G in cfg.Gamma:
        qs = quantile_spec(G, cfg.ell, cfg.d, cfg.nu, cfg.sigma[0], cfg.eta_hat, cfg.L0, cfg.d0_int)
        est = quantile_t(samples, qs, n_boot=cfg.n_boot, seed=cfg.seed)
        f, se = min_exceeds_frequency(trials, est.t_hat)
        rows.append((G, est.p, est.t_hat, est.ci_lo, est.ci_hi, qs.s_ell))
        summary["results"].append({"Gamma": G, "p": est.p, "t_hat": est.t_hat, "frac_le": est.frac_le,
                                   "frac_lt": est.frac_lt, "min_exceeds": f, "stderr": se,
                                   "bound": math.exp(-G)})
    write_csv(out / "quantiles.csv", ["Gamma", "p", "t_hat", "ci_lo", "ci_hi", "s_ell"], rows)
    write_json(out / "quantile_summary.json", summary)
    write_plot(out / "plot_quantiles.gp", "quantiles.csv", "quantile estimate", "Gamma", "t_hat",
               "1:3:4:5", "")
    return summary


def run_deconc(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    qs = quantile_spec(cfg.Gamma[0], cfg.ell, cfg.d, cfg.nu, cfg.sigma[0], cfg.eta_hat, cfg.L0,
                       cfg.d0_int)
    sched = schedule(cfg.sigma0, cfg.m, cfg.c_bar, cfg.c_star, params)
    rep = deconcentration_experiment(params, qs, sched, cfg.t, cfg.samples, cfg.h, cfg.eps,
                                     map_fn=map_fn, strict=cfg.strict)
    write_json(out / "deconc_report.json", rep.to_dict())
    m = len(rep.intervals)
    header = ["seed", "lambda1", "in_J"] + [f"in_J{i + 1}" for i in range(m)] + \
             [f"weight{i + 1}" for i in range(len(sched.u_list))]
    write_csv(out / "deconc_seeds.csv", header,
              [[r.seed, r.lambda1, r.in_J, *r.in_Ji, *r.weights] for r in rep.rows])
    write_plot(out / "plot_deconc.gp", "deconc_seeds.csv", "lambda1 per seed", "seed", "lambda1")
    return rep.to_dict()


def run_dos(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    t = 1.0 if cfg.t is None else cfg.t
    emp = extrapolated_laplace(t, params, L=cfg.L, h=cfg.h, cut=cfg.cut, n=cfg.samples, map_fn=map_fn)
    lap = dos_laplace(t, params, mc=cfg.mc, steps=cfg.steps, map_fn=map_fn)
    dos = emp.dos[-1]
    write_dos(dos, out / "dos.csv")
    write_csv(out / "laplace_realisations.csv",
              ["index", "full_h", "sub_h", "full_h2", "sub_h2", "extrapolated"],
              [(i, *emp.table[i].ravel(), emp.per_realisation[i]) for i in range(emp.table.shape[0])])
    summary = {"t": t, "empirical": emp.value, "empirical_se": emp.stderr,
               "empirical_raw": emp.raw(-1), "laplace": lap.value, "laplace_se": lap.stderr,
               "hs": list(emp.hs), "L": emp.L, "cut": emp.cut}
    try:
        fit = lifshitz_fit(dos, nu=params.nu)
        summary["lifshitz"] = {"slope": fit.slope, "theory": fit.theory,
                               "relative_error": fit.relative_error, "window": list(fit.window)}
    except InsufficientDataError as exc:
        summary["lifshitz"] = {"error": str(exc), "usable_range": exc.usable_range}
    write_json(out / "dos_summary.json", summary)
    write_plot(out / "plot_dos.gp", "dos.csv", "integrated density of states", "lambda", "M(lambda)",
               "1:2", "")
    return summary


def run_bec(cfg: Config, out: Path, map_fn) -> dict:
    params = cfg.params()
    rho_c = cfg.rho_c
    if rho_c is None:
        emp = extrapolated_laplace(1.0, params, L=cfg.L, h=cfg.h, cut=cfg.cut, n=cfg.samples,
                                   map_fn=map_fn)
        rho_c = critical_density(emp.dos[0], cfg.beta)
    rep = condensation_experiment(cfg.rho, cfg.beta, cfg.N_list, params, cfg.mc, h=cfg.h,
                                  rho_c=rho_c, kmax=cfg.kmax, map_fn=map_fn)
    write_csv(out / "bec.csv", ["N", "ell_N", "seed", "mu", "lambda1", "lambda2", "frac1", "frac2"],
              [(r.N, r.ell, r.seed, r.mu, r.lambda1, r.lambda2, r.frac1, r.frac2) for r in rep.rows])
    summary = rep.to_dict()
    write_json(out / "bec_summary.json", summary)
    write_plot(out / "plot_bec.gp", "bec.csv", "condensate fraction", "N", "frac1", "1:7",
               "" if rep.theory is None else f"set arrow from graph 0, first {rep.theory} "
                                             f"to graph 1, first {rep.theory} nohead\n")
    return summary


EXPERIMENTS = {
    "constants": run_constants,
    "sample": run_sample,
    "spectrum": run_spectrum,
    "gap-sweep": run_gap_sweep,
    "quantile": run_quantile,
    "deconc": run_deconc,
    "dos": run_dos,
    "bec": run_bec,
}


def run_experiment(command: str, cfg: Config, out=None) -> tuple[int, dict]:
    """Run one subcommand; the manifest is written whatever happens."""
    out = Path(cfg.out if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command, "version": __version__, "config_hash": cfg.hash(),
        "config": cfg.canonical(), "sources": cfg.sources, "jobs": cfg.jobs,
        "seeds": {"master": cfg.seed}, "python": platform.python_version(),
        "errors": [], "exit_code": EXIT_OK,
    }
    t0 = time.perf_counter()
    try:
        with task_map(cfg.jobs) as map_fn:
            manifest["summary"] = EXPERIMENTS[command](cfg, out, map_fn)
    except (KLError, Exception) as exc:
        code = exit_code_for(exc)
        manifest["errors"].append({"type": type(exc).__name__, "message": str(exc),
                                   "trace": traceback.format_exc(limit=4)})
        manifest["exit_code"] = code
    finally:
        manifest["wall_time"] = time.perf_counter() - t0
        manifest["outputs"] = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
        write_json(out / "manifest.json", manifest)
    return manifest["exit_code"], manifest
