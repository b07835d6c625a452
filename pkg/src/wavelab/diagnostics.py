"""Statistical checks: martingale and its quadratic variation, stationary
laws of the fast equation, weak-error tables over nu, order fits and
two-sample Kolmogorov-Smirnov distances.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .dynamics import run_ensemble
from .errors import FitRefusedError, ResolutionError
from .spectral import SpectralField

KS_C_ALPHA = {0.10: 1.2239, 0.05: 1.3581, 0.01: 1.6276}


# -- functionals --------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunctional:
    """Scalar observable of a field: <u, phi>, <u, phi>**2 or ||u||_0**2."""

    __test__ = False  # not a pytest class

    kind: str
    phi: SpectralField = None
    name: str = None

    def __post_init__(self):
        if self.kind not in ("projection", "squared-projection", "squared-norm"):
            raise ValueError(f"unknown functional kind {self.kind!r}")
        if self.kind != "squared-norm" and self.phi is None:
            raise ValueError(f"{self.kind} functional needs a test field phi")
        if self.name is None:
            object.__setattr__(self, "name", self._default_name())

    def _default_name(self):
        if self.kind == "squared-norm":
            return "L2sq"
        nz = np.flatnonzero(self.phi.coeffs)
        label = f"e{nz[0] + 1}" if nz.size == 1 and self.phi.coeffs[nz[0]] == 1.0 else "phi"
        return f"<u,{label}>" if self.kind == "projection" else f"<u,{label}>^2"

    @classmethod
    def mode(cls, basis, k, kind="projection"):
        return cls(kind, SpectralField.mode(basis, k))

    def __call__(self, U):
        """Evaluate on orthonormal coefficient arrays with modes on the last axis."""
        U = np.asarray(U, dtype=float)
        if self.kind == "squared-norm":
            return np.sum(U**2, axis=-1)
        p = U @ self.phi.coeffs
        return p if self.kind == "projection" else p**2


@dataclass
class EnsembleSummary:
    mean: float
    variance: float
    stderr: float
    count: int
    aborts: int = 0


def summarize(samples, aborts=None):
    """Mean, variance and standard error of the finite entries of ``samples``."""
    x = np.asarray(samples, dtype=float)
    ok = np.isfinite(x)
    n = int(ok.sum())
    if aborts is None:
        aborts = int(x.size - n)
    if n == 0:
        return EnsembleSummary(np.nan, np.nan, np.nan, 0, aborts)
    xs = x[ok]
    var = float(xs.var(ddof=1)) if n > 1 else 0.0
    return EnsembleSummary(float(xs.mean()), var, float(np.sqrt(var / n)), n, aborts)


# -- martingale ---------------------------------------------------------------------

def martingale_process(trajectory, phi, params, include_velocity=True):
    """Martingale built from a recorded wave path, tested against ``phi``.

    Without the velocity term this is

        nu**-alpha { <u(t) - u0, phi> + int_0^t [<grad u, grad phi> - <f(u), phi>] ds }

    and with it (the default) the term ``nu**(1-alpha) <v(t) - v(0), phi>``
    is added, which makes the process exactly ``<W(t), phi>`` for the
    continuous dynamics.  The time integral uses the trapezoid rule on the
    recorded grid.  Accepts a :class:`Trajectory` or ``(times, u, v)``
    arrays with leading batch axes.
    """
    if hasattr(trajectory, "times"):
        times, U, V = trajectory.times, trajectory.u, trajectory.v
    else:
        times, U, V = trajectory
    times = np.asarray(times, dtype=float)
    U = np.asarray(U, dtype=float)
    if times.size < 10:
        raise ResolutionError(f"need at least 10 recorded samples, got {times.size}")
    if include_velocity and V is None:
        raise ValueError("velocity term requested but trajectory has no v")
    c = phi.coeffs
    lam = params.basis.eigenvalues
    u_phi = U @ c
    integrand = U @ (lam * c) - params.forcing(U) @ c
    drift = integrate.cumulative_trapezoid(integrand, times, axis=-1, initial=0.0)
    M = (u_phi - u_phi[..., :1] + drift) / params.nu**params.alpha
    if include_velocity:
        v_phi = np.asarray(V, dtype=float) @ c
        M = M + params.nu ** (1.0 - params.alpha) * (v_phi - v_phi[..., :1])
    return M


def remainder_max(trajectory, phi, nu):
    """max_t sqrt(nu) |<v(t) - v(0), phi>| for each path."""
    V = trajectory.v if hasattr(trajectory, "v") else np.asarray(trajectory)
    v_phi = np.asarray(V) @ phi.coeffs
    return np.sqrt(nu) * np.max(np.abs(v_phi - v_phi[..., :1]), axis=-1)


@dataclass
class QVResult:
    slope: float
    intercept: float
    r2: float
    times: np.ndarray
    qv: np.ndarray
    increments: np.ndarray = field(repr=False)


def realized_qv(series, times):
    """Realized quadratic variation and its least-squares slope against t.

    ``series`` may carry leading path axes; the cumulative QV is averaged
    over paths before the fit.
    """
    series = np.asarray(series, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.size < 100:
        raise ResolutionError(f"realized QV needs at least 100 samples, got {times.size}")
    inc = np.diff(series, axis=-1)
    qv = np.concatenate([np.zeros(series.shape[:-1] + (1,)), np.cumsum(inc**2, axis=-1)], axis=-1)
    mean_qv = qv.reshape(-1, times.size).mean(axis=0)
    if np.ptp(mean_qv) == 0.0:
        return QVResult(0.0, float(mean_qv[0]), 1.0, times, mean_qv, inc)
    fit = stats.linregress(times, mean_qv)
    return QVResult(float(fit.slope), float(fit.intercept), float(fit.rvalue**2), times, mean_qv, inc)


# -- fast-equation stationary law ---------------------------------------------------

@dataclass
class StationaryStats:
    mean: np.ndarray
    variance: np.ndarray
    se_mean: np.ndarray
    se_variance: np.ndarray
    n_eff: float


def stationary_stats(v, dt, burn_in, nu):
    """Time-averaged per-mode mean and variance after ``burn_in``.

    ``v`` has shape (n_t, K) or (n_paths, n_t, K).  Standard errors use the
    effective sample size of an OU process with correlation time ``nu``:
    lag-one correlation rho = exp(-dt/nu) for the mean and rho**2 for the
    variance.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        v = v[None]
    if burn_in < 10 * nu * (1 - 1e-12):
        raise ResolutionError(f"burn-in {burn_in:g} shorter than 10 nu = {10 * nu:g}")
    skip = int(np.ceil(burn_in / dt - 1e-9))
    tail = v[:, skip:, :]
    n_paths, n_t, _ = tail.shape
    rho = np.exp(-dt / nu)
    n_eff_mean = n_paths * n_t * (1 - rho) / (1 + rho)
    n_eff_var = n_paths * n_t * (1 - rho**2) / (1 + rho**2)
    if n_t < 2 or n_eff_mean < 10:
        raise ResolutionError("too little data after burn-in for stationary statistics")
    flat = tail.reshape(-1, tail.shape[-1])
    mean = flat.mean(axis=0)
    var = flat.var(axis=0, ddof=1)
    return StationaryStats(mean, var, np.sqrt(var / n_eff_mean), var * np.sqrt(2.0 / n_eff_var),
                           float(n_eff_mean))


# -- weak error -----------------------------------------------------------------------

@dataclass
class FunctionalError:
    name: str
    diff: float
    se: float
    mean_full: float
    mean_reference: float
    conclusive: bool


@dataclass
class WeakErrorRow:
    nu: float
    errors: dict
    n_traj: int
    aborts: int
    max_h1: EnsembleSummary

    def error(self, name):
        return self.errors[name]


def weak_error_table(nu_grid, template, functionals, n_traj, seed, u0, u1=None,
                     coupling="common-noise", full_model="wave", threads=None):
    """One row per nu comparing E[F(u_full(T))] with E[F(u_avg(T))].

    ``full_model="averaged"`` replaces the full model by a second copy of
    the averaged model (self-comparison).  Every row reuses ``seed``, so
    common-noise rows share trajectory streams across nu.
    """
    from dataclasses import replace

    rows = []
    for nu in nu_grid:
        params = replace(template, nu=float(nu))
        if full_model == "wave":
            run = run_ensemble(params, u0, u1, n_traj, seed, models=("wave", "averaged"),
                               coupling=coupling, threads=threads)
            full = run.terminal["wave"][0]
            ref = run.terminal["averaged"][0]
            aborts = run.abort_count
            max_h1 = summarize(run.max_h1["wave"])
        elif full_model == "averaged":
            run = run_ensemble(params, u0, None, n_traj, seed, models=("averaged",), threads=threads)
            purpose = "wiener" if coupling == "common-noise" else "wiener-averaged"
            other = run_ensemble(params, u0, None, n_traj, seed, models=("averaged",),
                                 threads=threads, purpose=purpose)
            full = other.terminal["averaged"][0]
            ref = run.terminal["averaged"][0]
            aborts = run.abort_count + other.abort_count
            max_h1 = summarize(other.max_h1["averaged"])
        else:
            raise ValueError(f"unknown full model {full_model!r}")
        errors = {}
        for F in functionals:
            a, b = F(full), F(ref)
            ok = np.isfinite(a) & np.isfinite(b)
            a, b = a[ok], b[ok]
            n = a.size
            diff = float(a.mean() - b.mean())
            if coupling == "common-noise":
                se = float(np.std(a - b, ddof=1) / np.sqrt(n)) if n > 1 else np.nan
            else:
                se = float(np.sqrt(a.var(ddof=1) / n + b.var(ddof=1) / n)) if n > 1 else np.nan
            conclusive = bool(abs(diff) > 2.0 * se)
            errors[F.name] = FunctionalError(F.name, diff, se, float(a.mean()), float(b.mean()), conclusive)
        rows.append(WeakErrorRow(float(nu), errors, n_traj, aborts, max_h1))
    return rows


@dataclass
class OrderFit:
    slope: float
    intercept: float
    r2: float
    slope_ci: tuple
    n_rows: int


def order_fit(rows, functional=None):
    """Least squares of log|error| against log nu over conclusive rows.

    ``rows`` is a weak-error table (``functional`` names the column) or a
    sequence of ``(nu, error)`` pairs, all taken as conclusive.
    """
    pts = []
    for row in rows:
        if isinstance(row, WeakErrorRow):
            name = functional or next(iter(row.errors))
            e = row.errors[name]
            if e.conclusive:
                pts.append((row.nu, abs(e.diff)))
        else:
            nu, err = row
            pts.append((float(nu), abs(float(err))))
    if len(pts) < 3:
        raise FitRefusedError(f"order fit needs at least 3 conclusive rows, got {len(pts)}")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    fit = stats.linregress(x, y)
    tcrit = stats.t.ppf(0.975, len(pts) - 2) if len(pts) > 2 else np.inf
    half = tcrit * fit.stderr
    return OrderFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2),
                    (float(fit.slope - half), float(fit.slope + half)), len(pts))


# -- distribution distance -------------------------------------------------------------

@dataclass
class KSResult:
    statistic: float
    critical: float
    reject: bool


def ks_statistic(a, b):
    """sup_x |F_a(x) - F_b(x)| for the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_distance(a, b, level=0.05):
    """Two-sample KS statistic with the asymptotic critical value at ``level``."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    d = ks_statistic(a, b)
    c = KS_C_ALPHA.get(level)
    if c is None:
        c = np.sqrt(-0.5 * np.log(level / 2.0))
    crit = c * np.sqrt((a.size + b.size) / (a.size * b.size))
    return KSResult(d, float(crit), bool(d > crit))
