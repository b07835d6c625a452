"""Command-line entry point.

    wavelab <command> [--config FILE] [--seed N] [--threads N] [--out DIR]

Commands: simulate, weak-error, fast-ou-stats, martingale-qv,
ssm-residual, ssm-compare.  Exit codes: 0 success, 2 configuration error,
3 numerical blow-up, 4 a check ran and failed.
"""

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .config import load_config, parse_functional
from .diagnostics import (TestFunctional, martingale_process, order_fit, realized_qv,
                          stationary_stats, weak_error_table)
from .dynamics import fast_frozen_mean, run_ensemble, simulate_fast_frozen
from .errors import BlowUpError, ConfigError, ExpansionDomainError, FitRefusedError
from .noise import derive_stream
from .output import OutputDir
from .spectral import SpectralField
from .ssm import (Increments, OuBank, averaged_ssm_drift_diffusion, residual_check,
                  ssm_drift_diffusion, ssm_field)

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 2, 3, 4


class Outcome:
    def __init__(self, status="ok", code=EXIT_OK, aborts=None):
        self.status = status
        self.code = code
        self.aborts = aborts or {}


def _field(coeffs, basis):
    c = np.zeros(basis.K)
    c[:len(coeffs)] = coeffs
    return SpectralField(basis, c)


# -- simulate --------------------------------------------------------------------------

def _simulate_ensemble(cfg, out, threads):
    run = cfg["run"]
    params = cfg.wave_params()
    model = cfg.model
    u0, u1 = cfg["wave"]["u0"], cfg["wave"]["u1"]
    res = run_ensemble(params, u0, u1, run["ensemble"], run["seed"], models=(model,),
                       record_every=run["record_every"], threads=threads)
    U = res.recorded[model]
    V = res.recorded.get("wave_v") if model == "wave" else None
    for i in range(min(run["path_files"], res.n_traj)):
        out.write_series(f"traj_{i:05d}.csv", res.times, U[i], None if V is None else V[i])
    ok = ~res.aborted
    with np.errstate(invalid="ignore"):
        mean_u = U[ok].mean(axis=0) if ok.any() else np.full(U.shape[1:], np.nan)
        var_u = U[ok].var(axis=0) if ok.any() else np.full(U.shape[1:], np.nan)
        mean_v = var_v = None
        if V is not None:
            mean_v = V[ok].mean(axis=0) if ok.any() else np.full(V.shape[1:], np.nan)
            var_v = V[ok].var(axis=0) if ok.any() else np.full(V.shape[1:], np.nan)
    out.write_series("ensemble_mean.csv", res.times, mean_u, mean_v)
    out.write_series("ensemble_var.csv", res.times, var_u, var_v)
    aborts = {model: res.abort_count}
    if res.abort_count:
        return Outcome("blow-up", EXIT_BLOWUP, aborts)
    return Outcome(aborts=aborts)


def _simulate_fast_frozen(cfg, out):
    run, w = cfg["run"], cfg["wave"]
    params = cfg.wave_params()
    u = _field(w["u0"], params.basis)
    every = run["record_every"]
    for i in range(run["ensemble"]):
        rng = derive_stream(run["seed"], i, "fast-frozen")
        t, v = simulate_fast_frozen(u, params.nu, params.noise, params.T, rng, dt=params.dt,
                                    beta=params.beta, cubic_coeff=params.cubic_coeff)
        keep = np.unique(np.r_[np.arange(0, t.size, every), t.size - 1])
        if i < run["path_files"]:
            U = np.tile(u.coeffs, (keep.size, 1))
            out.write_series(f"traj_{i:05d}.csv", t[keep], U, v[keep])
    return Outcome(aborts={"fast-frozen": 0})


def _simulate_ssm(cfg, out):
    run, s = cfg["run"], cfg["ssm"]
    params = cfg.ssm_params()
    if params.nu == 0.0:
        raise ConfigError("ssm.nu must be positive to simulate the slow manifold")
    n = int(np.ceil(s["T"] / s["h"] - 1e-9)) if s["T"] > 0 else 0
    h = s["T"] / n if n else s["h"]
    every = run["record_every"]
    aborts = 0
    for i in range(run["ensemble"]):
        rng = derive_stream(run["seed"], i, "ssm")
        bank = OuBank.stationary(params.nu, params.K_ssm, rng)
        a = a_bar = s["a0"]
        rows = [[0.0, a, a_bar, *ssm_field(a, params, bank).coeffs]]
        for j in range(1, n + 1):
            bank.step(h, rng)
            try:
                a, a_bar = (a + ssm_drift_diffusion(a, params, bank),
                            a_bar + averaged_ssm_drift_diffusion(a_bar, params, bank))
            except ExpansionDomainError:
                aborts += 1
                break
            if j % every == 0 or j == n:
                rows.append([j * h, a, a_bar, *ssm_field(a, params, bank).coeffs])
        if i < run["path_files"]:
            header = ["t", "a", "a_bar"] + [f"u_{k}" for k in range(1, params.K_ssm + 1)]
            out.write_csv(f"traj_{i:05d}.csv", header, rows)
    if aborts:
        return Outcome("left expansion domain", EXIT_BLOWUP, {"ssm": aborts})
    return Outcome(aborts={"ssm": 0})


def cmd_simulate(cfg, out, threads):
    if cfg.model in ("wave", "averaged"):
        return _simulate_ensemble(cfg, out, threads)
    if cfg.model == "fast-frozen":
        return _simulate_fast_frozen(cfg, out)
    return _simulate_ssm(cfg, out)


# -- weak error ---------------------------------------------------------------------------

def cmd_weak_error(cfg, out, threads):
    run, we = cfg["run"], cfg["weak_error"]
    template = cfg.wave_params()
    fns = []
    for spec in we["functionals"]:
        kind, k = parse_functional(spec, template.K)
        phi = None if k is None else SpectralField.mode(template.basis, k)
        fns.append(TestFunctional(kind, phi, name=spec))
    rows = weak_error_table(we["nu_grid"], template, fns, run["ensemble"], run["seed"],
                            cfg["wave"]["u0"], cfg["wave"]["u1"], coupling=we["coupling"],
                            full_model=we["full_model"], threads=threads)
    records = []
    for row in rows:
        for name, e in row.errors.items():
            records.append({"nu": row.nu, "functional": name, "diff": e.diff, "se": e.se,
                            "conclusive": e.conclusive, "mean_full": e.mean_full,
                            "mean_reference": e.mean_reference, "n_traj": row.n_traj,
                            "aborts": row.aborts, "max_h1_mean": row.max_h1.mean,
                            "max_h1_se": row.max_h1.stderr})
    out.write_jsonl("weak_error.jsonl", records)
    fits = []
    for F in fns:
        errs = [abs(r.errors[F.name].diff) for r in sorted(rows, key=lambda r: r.nu)]
        rec = {"functional": F.name, "monotone_decreasing": bool(np.all(np.diff(errs) >= 0))}
        try:
            fit = order_fit(rows, F.name)
            rec.update(refused=False, slope=fit.slope, intercept=fit.intercept, r2=fit.r2,
                       slope_ci=list(fit.slope_ci), n_rows=fit.n_rows)
        except FitRefusedError as exc:
            rec.update(refused=True, reason=str(exc))
        fits.append(rec)
    out.write_jsonl("order_fit.jsonl", fits)
    aborts = sum(r.aborts for r in rows)
    if aborts:
        return Outcome("blow-up", EXIT_BLOWUP, {"wave": aborts})
    return Outcome(aborts={"wave": 0})


# -- stationary law of the fast equation ----------------------------------------------------

def cmd_fast_ou_stats(cfg, out, threads):
    run, fo = cfg["run"], cfg["fast_ou"]
    params = cfg.wave_params()
    nu, basis = params.nu, params.basis
    dt = fo["dt_nu"] * nu
    burn = fo["burn_in_nu"] * nu
    T = burn + fo["horizon_nu"] * nu
    b = params.b
    records, passed = [], True
    for j, coeffs in enumerate(fo["frozen"]):
        u = _field(coeffs, basis)
        paths = []
        for i in range(fo["paths"]):
            rng = derive_stream(run["seed"], i, f"fast-ou-{j}")
            _, v = simulate_fast_frozen(u, nu, params.noise, T, rng, dt=dt, beta=params.beta,
                                        cubic_coeff=params.cubic_coeff)
            paths.append(v)
        st = stationary_stats(np.array(paths), dt, burn, nu)
        m = fast_frozen_mean(u, params.beta, params.cubic_coeff)
        for k in range(basis.K):
            target_var = b[k] / 2.0
            mean_ok = abs(st.mean[k] - m[k]) <= fo["mean_se"] * st.se_mean[k] or (
                target_var == 0.0 and st.mean[k] == m[k])
            if target_var > 0:
                ratio = st.variance[k] / target_var
                var_ok = abs(ratio - 1.0) <= fo["var_rtol"]
            else:
                ratio, var_ok = None, bool(st.variance[k] == 0.0)
            ok = bool(mean_ok and var_ok)
            passed &= ok
            records.append({"frozen": list(coeffs), "mode": k + 1, "mean": st.mean[k],
                            "expected_mean": m[k], "se_mean": st.se_mean[k],
                            "variance": st.variance[k], "expected_variance": target_var,
                            "variance_ratio": ratio, "pass": ok})
    out.write_jsonl("fast_ou_stats.jsonl", records)
    return Outcome() if passed else Outcome("check failed", EXIT_CHECK)


# -- martingale quadratic variation -----------------------------------------------------------

def cmd_martingale_qv(cfg, out, threads):
    run, mg = cfg["run"], cfg["martingale"]
    params = cfg.wave_params()
    res = run_ensemble(params, cfg["wave"]["u0"], cfg["wave"]["u1"], run["ensemble"], run["seed"],
                       models=("wave",), record_every=run["record_every"], threads=threads,
                       purpose="martingale")
    if res.abort_count:
        return Outcome("blow-up", EXIT_BLOWUP, {"wave": res.abort_count})
    k = mg["mode"]
    phi = SpectralField.mode(params.basis, k)
    M = martingale_process((res.times, res.recorded["wave"], res.recorded["wave_v"]), phi, params)
    q = realized_qv(M, res.times)
    expected = float(params.b[k - 1])
    rel = abs(q.slope / expected - 1.0) if expected > 0 else abs(q.slope)
    ok = bool(rel <= mg["slope_rtol"] and q.r2 >= mg["r2_min"])
    final = M[:, -1]
    out.write_csv("qv.csv", ["t", "qv"], np.column_stack([q.times, q.qv]))
    out.write_jsonl("martingale_qv.jsonl", [{
        "mode": k, "slope": q.slope, "expected_slope": expected, "relative_error": rel,
        "r2": q.r2, "final_mean": float(final.mean()),
        "final_se": float(final.std(ddof=1) / np.sqrt(final.size)) if final.size > 1 else None,
        "pass": ok,
    }])
    aborts = {"wave": 0}
    return Outcome(aborts=aborts) if ok else Outcome("check failed", EXIT_CHECK, aborts)


# -- slow manifold --------------------------------------------------------------------------

def cmd_ssm_residual(cfg, out, threads):
    run, res = cfg["run"], cfg["residual"]
    params = cfg.ssm_params()
    if res["mode"] == "linear-noise":
        kw = {"h_nu": res["h_nu"], "window": res["window"], "n_windows": res["n_windows"]}
        rng = derive_stream(run["seed"], 0, "ssm-residual")
    else:
        kw, rng = {}, None
    report = residual_check(res["mode"], params, res["values"], rng=rng, **kw)
    ok = bool(res["slope_min"] <= report.slope <= res["slope_max"])
    records = [{"value": x, "residual": r} for x, r in zip(report.values, report.residuals)]
    records.append({"mode": report.mode, "slope": report.slope, "intercept": report.intercept,
                    "r2": report.r2, "slope_min": res["slope_min"], "slope_max": res["slope_max"],
                    "pass": ok})
    out.write_jsonl("ssm_residual.jsonl", records)
    return Outcome() if ok else Outcome("check failed", EXIT_CHECK)


def cmd_ssm_compare(cfg, out, threads):
    run, s = cfg["run"], cfg["ssm"]
    params = cfg.ssm_params()
    rng = derive_stream(run["seed"], 0, "ssm-compare").generator
    n = cfg["compare"]["samples"]
    mismatches = 0
    worst = 0.0
    for _ in range(n):
        p = replace(params, nu=0.0, beta_prime=float(rng.uniform(-0.2, 0.2)),
                    gamma=float(rng.uniform(0.0, 1.0)), sigma=float(rng.uniform(0.0, 1.0)),
                    amps=tuple(rng.uniform(0.0, 1.0, 5)))
        h = float(rng.uniform(1e-4, 1e-2))
        inc = Increments(h, tuple(rng.standard_normal(5) * np.sqrt(h)))
        a = float(rng.uniform(-p.radius, p.radius))
        x = ssm_drift_diffusion(a, p, inc)
        y = averaged_ssm_drift_diffusion(a, p, inc)
        if x != y:
            mismatches += 1
            worst = max(worst, abs(x - y))
    records = [{"check": "averaged == full at nu=0", "samples": n, "mismatches": mismatches,
                "max_abs_difference": worst, "pass": mismatches == 0}]
    # slow paths of both models under one noise realization, at the configured nu
    aborts = 0
    if params.nu > 0 and s["T"] > 0:
        steps = int(np.ceil(s["T"] / s["h"] - 1e-9))
        h = s["T"] / steps
        path_rng = derive_stream(run["seed"], 0, "ssm-compare-path")
        bank = OuBank.stationary(params.nu, params.K_ssm, path_rng)
        a = a_bar = s["a0"]
        rows = [[0.0, a, a_bar]]
        for j in range(1, steps + 1):
            bank.step(h, path_rng)
            try:
                a, a_bar = (a + ssm_drift_diffusion(a, params, bank),
                            a_bar + averaged_ssm_drift_diffusion(a_bar, params, bank))
            except ExpansionDomainError:
                aborts = 1
                break
            if j % run["record_every"] == 0 or j == steps:
                rows.append([j * h, a, a_bar])
        out.write_csv("slow_paths.csv", ["t", "a", "a_bar"], rows)
        diff = np.abs(np.array(rows)[:, 1] - np.array(rows)[:, 2])
        records.append({"check": "path deviation", "nu": params.nu,
                        "max_abs_deviation": float(diff.max())})
    out.write_jsonl("ssm_compare.jsonl", records)
    if mismatches:
        return Outcome("check failed", EXIT_CHECK, {"ssm": aborts})
    if aborts:
        return Outcome("left expansion domain", EXIT_BLOWUP, {"ssm": aborts})
    return Outcome(aborts={"ssm": 0})


COMMANDS = {
    "simulate": cmd_simulate,
    "weak-error": cmd_weak_error,
    "fast-ou-stats": cmd_fast_ou_stats,
    "martingale-qv": cmd_martingale_qv,
    "ssm-residual": cmd_ssm_residual,
    "ssm-compare": cmd_ssm_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="wavelab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        p.add_argument("--threads", type=int, help="worker threads (default: $AWL_THREADS or 1)")
        p.add_argument("--out", help="output directory (overrides run.outputs)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides[("run", "seed")] = args.seed
    if args.out is not None:
        overrides[("run", "outputs")] = args.out
    try:
        cfg = load_config(args.config, overrides)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = OutputDir(cfg["run"]["outputs"])
    start = time.perf_counter()
    try:
        outcome = COMMANDS[args.command](cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        outcome = Outcome(f"blow-up at t={exc.time:g}", EXIT_BLOWUP)
    out.write_manifest(cfg, args.command, __version__, time.perf_counter() - start,
                       outcome.aborts, outcome.status, outcome.code)
    if outcome.code:
        print(f"{args.command}: {outcome.status}", file=sys.stderr)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())
