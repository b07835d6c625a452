"""Time integration of the damped wave system and its averaged equation.

Per Galerkin mode ``k`` the full model is the linear pair

    du = v dt
    dv = -(1/nu) [v + lambda_k u - f_k(u)] dt + nu**(alpha-1) sqrt(b_k) dw_k

with ``f(u) = beta u - c u**3`` projected on the sine modes.  The
``stiff-exact`` scheme propagates the linear part with the exact 2x2
matrix exponential and samples the exact stochastic convolution, so the
step need not resolve ``1/nu``; the nonlinearity is frozen over a step
(exponential Euler).  ``euler-maruyama`` is a plain explicit scheme kept
for cross-validation.

The averaged model ``du = [Delta u + f(u)] dt + nu**alpha dW`` is stepped
with exponential Euler.  Each step of either model consumes three standard
normals per mode; the full model uses the first two and the averaged model
the third row of the joint Cholesky factor, so feeding both the same stream
drives them with the same Brownian path.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate

from .errors import BlowUpError, SizingError
from .noise import NoiseModel, derive_stream, ou_exact_step, standard_normal
from .spectral import Grid, SineBasis, SpectralField, cubic_array

SCHEMES = ("stiff-exact", "euler-maruyama")
DOUBLE_ROOT_TOL = 1e-6
SERIES_TERMS = 6
SHORT_STEP_TOL = 1e-2
DRAWS_PER_MODE = 3


@dataclass(frozen=True)
class WaveState:
    u: SpectralField
    v: SpectralField

    def __post_init__(self):
        if self.u.basis != self.v.basis:
            raise SizingError("u and v must share a basis")

    @property
    def basis(self):
        return self.u.basis


@dataclass(frozen=True)
class WaveParams:
    nu: float
    noise: NoiseModel
    K: int
    dt: float
    T: float
    beta: float = 1.0
    alpha: float = None
    scheme: str = "stiff-exact"
    cubic_coeff: float = 1.0

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.noise.alpha)
        elif self.alpha != self.noise.alpha:
            object.__setattr__(self, "noise", replace(self.noise, alpha=self.alpha))
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if not 0.0 <= self.alpha <= 0.5:
            raise ValueError(f"alpha must lie in [0, 1/2], got {self.alpha}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "euler-maruyama" and self.dt > self.nu / 20 * (1 + 1e-12):
            raise ValueError(f"euler-maruyama needs dt <= nu/20 = {self.nu / 20:g}, got {self.dt:g}")
        if int(self.K) != self.K or self.K < 1:
            raise SizingError("K must be a positive integer")

    @property
    def basis(self):
        return SineBasis(self.K)

    @property
    def grid(self):
        return Grid.dealiased(self.K)

    @property
    def n_steps(self):
        if self.T == 0:
            return 0
        return max(1, int(np.ceil(self.T / self.dt - 1e-9)))

    @property
    def step(self):
        """Effective step: T split into ``n_steps`` equal pieces."""
        n = self.n_steps
        return self.T / n if n else self.dt

    @property
    def b(self):
        return self.noise.padded(self.K)

    def forcing(self, u):
        """f(u) coefficients for an array of orthonormal coefficients."""
        if self.cubic_coeff == 0.0:
            return self.beta * u
        cube = -cubic_array(u, 0.0, self.grid.M, SineBasis(self.K).scale)
        return self.beta * u - self.cubic_coeff * cube


# -- linear propagator ----------------------------------------------------------

def _expm1_over(p, h):
    """(exp(p h) - 1) / p, elementwise, finite for p != 0."""
    return np.expm1(p * h) / p


def _cs_terms(lam, nu, h):
    """e^{ch} cosh(dh) and e^{ch} sinh(dh)/d for the mode matrix, branch-stable."""
    lam = np.asarray(lam, dtype=float)
    h = np.asarray(h, dtype=float)
    disc = 1.0 - 4.0 * nu * lam
    c = -0.5 / nu
    C = np.empty(np.broadcast(lam, h).shape)
    S = np.empty_like(C)
    series = np.abs(disc) < DOUBLE_ROOT_TOL
    real = (disc > 0) & ~series
    cplx = (disc < 0) & ~series
    lam_b, h_b, disc_b = np.broadcast_arrays(lam, h, disc)

    if np.any(real):
        hr, dr, lr = h_b[real], disc_b[real], lam_b[real]
        root = np.sqrt(dr)
        delta = root / (2.0 * nu)
        r1 = -2.0 * lr / (1.0 + root)
        r2 = (-1.0 - root) / (2.0 * nu)
        e1, e2 = np.exp(r1 * hr), np.exp(r2 * hr)
        C[real] = 0.5 * (e1 + e2)
        small = 2.0 * delta * hr < 1.0
        S_real = np.where(small, e2 * np.expm1(np.minimum(2.0 * delta * hr, 1.0)) / (2.0 * delta),
                          (e1 - e2) / (2.0 * delta))
        S[real] = S_real
    if np.any(cplx):
        hc, dc = h_b[cplx], disc_b[cplx]
        omega = np.sqrt(-dc) / (2.0 * nu)
        decay = np.exp(c * hc)
        C[cplx] = decay * np.cos(omega * hc)
        S[cplx] = decay * np.sin(omega * hc) / omega
    if np.any(series):
        hs, ds = h_b[series], disc_b[series]
        x = ds / (4.0 * nu**2) * hs**2
        even = np.zeros_like(x)
        odd = np.zeros_like(x)
        term_e = np.ones_like(x)
        term_o = np.ones_like(x)
        for n in range(SERIES_TERMS):
            even += term_e
            odd += term_o
            term_e = term_e * x / ((2 * n + 1) * (2 * n + 2))
            term_o = term_o * x / ((2 * n + 2) * (2 * n + 3))
        decay = np.exp(c * hs)
        C[series] = decay * even
        S[series] = decay * hs * odd
    return C, S


def transition_matrix(lam, nu, h):
    """exp(h A) with A = [[0, 1], [-lam/nu, -1/nu]], shape (..., 2, 2)."""
    C, S = _cs_terms(lam, nu, h)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), C.shape)
    c = -0.5 / nu
    E = np.empty(C.shape + (2, 2))
    E[..., 0, 0] = C - c * S
    E[..., 0, 1] = S
    E[..., 1, 0] = -lam / nu * S
    E[..., 1, 1] = C - S / (2.0 * nu)
    return E


def mode_eigenvalues(lam, nu):
    """Roots of nu s^2 + s + lam = 0 (complex when 4 nu lam > 1)."""
    lam = np.asarray(lam, dtype=complex)
    root = np.sqrt(1.0 - 4.0 * nu * lam)
    return (-1.0 + root) / (2.0 * nu), (-1.0 - root) / (2.0 * nu)


def _roots_stable(lam, nu):
    lam = np.asarray(lam, dtype=float)
    root = np.sqrt((1.0 - 4.0 * nu * lam).astype(complex))
    r1 = -2.0 * lam / (1.0 + root)
    r2 = (-1.0 - root) / (2.0 * nu)
    return r1, r2


def _closed_form_moments(lam, nu, g, a, h):
    """Forcing weights and joint noise covariance via exponential integrals."""
    r1, r2 = _roots_stable(lam, nu)
    D = r1 - r2
    I = lambda p: _expm1_over(p, h)  # noqa: E731
    i11, i12, i22 = I(2 * r1), I(r1 + r2), I(2 * r2)
    g2 = (g * g) / (D * D)
    cov = np.zeros(np.shape(lam) + (3, 3))
    s11 = g2 * (i11 - 2 * i12 + i22)
    s12 = g2 * (r1 * i11 - (r1 + r2) * i12 + r2 * i22)
    s22 = g2 * (r1 * r1 * i11 - 2 * r1 * r2 * i12 + r2 * r2 * i22)
    j1, j2 = I(r1 - lam), I(r2 - lam)
    c13 = g * a / D * (j1 - j2)
    c23 = g * a / D * (r1 * j1 - r2 * j2)
    cov[..., 0, 0], cov[..., 1, 1] = s11.real, s22.real
    cov[..., 0, 1] = cov[..., 1, 0] = s12.real
    cov[..., 0, 2] = cov[..., 2, 0] = c13.real
    cov[..., 1, 2] = cov[..., 2, 1] = c23.real
    cov[..., 2, 2] = a * a * -np.expm1(-2 * lam * h) / (2 * lam)
    weight = np.zeros(np.shape(lam) + (2,))
    weight[..., 0] = ((I(r1) - I(r2)) / D).real
    weight[..., 1] = ((np.expm1(r1 * h) - np.expm1(r2 * h)) / D).real
    return weight, cov


def _quadrature_moments(lam, nu, g, a, h):
    """Same quantities as :func:`_closed_form_moments` by adaptive quadrature."""
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    g = np.broadcast_to(g, lam.shape)
    a = np.broadcast_to(a, lam.shape)

    def integrand(s):
        E = transition_matrix(lam, nu, s)
        col = np.empty(lam.shape + (3,))
        col[..., 0] = g * E[..., 0, 1]
        col[..., 1] = g * E[..., 1, 1]
        col[..., 2] = a * np.exp(-lam * s)
        out = np.concatenate([
            (col[..., :, None] * col[..., None, :]).reshape(lam.shape + (9,)),
            E[..., :, 1],
        ], axis=-1)
        return out.ravel()

    val, _ = integrate.quad_vec(integrand, 0.0, h, epsabs=0.0, epsrel=1e-13)
    val = val.reshape(lam.shape + (11,))
    cov = val[..., :9].reshape(lam.shape + (3, 3))
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return val[..., 9:], cov


def psd_cholesky(cov, tol=1e-300):
    """Lower-triangular factor of a batch of PSD matrices; zero columns where singular."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[-1]
    L = np.zeros_like(cov)
    for j in range(n):
        d = cov[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        ljj = np.sqrt(np.maximum(d, 0.0))
        L[..., j, j] = ljj
        safe = np.where(ljj > tol, ljj, 1.0)
        for i in range(j + 1, n):
            off = cov[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j], axis=-1)
            L[..., i, j] = np.where(ljj > tol, off / safe, 0.0)
    return L


@dataclass(frozen=True)
class ModePropagator:
    """Exact one-step data for every mode.

    ``E``: (K, 2, 2) transition matrices.  ``weight``: (K, 2) response of
    (u, v) to a unit forcing in the v equation held constant over the
    step.  ``cov``: (K, 3, 3) joint covariance of the full-model noise
    (u, v) and the averaged-model noise driven by the same dw.
    """

    h: float
    E: np.ndarray
    weight: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(repr=False)

    @property
    def sigma(self):
        return self.cov[..., :2, :2]


def build_propagator(lam, nu, alpha, b, h):
    """Exact linear transition and stochastic-convolution covariance per mode."""
    if not h > 0 or not nu > 0:
        raise ValueError("need h > 0 and nu > 0")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), lam.shape)
    g = nu ** (alpha - 1.0) * np.sqrt(b)
    a = nu**alpha * np.sqrt(b)
    E = transition_matrix(lam, nu, h)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        weight, cov = _closed_form_moments(lam, nu, g, a, h)
    disc = np.abs(1.0 - 4.0 * nu * lam)
    spread = np.sqrt(disc) / nu * h
    fallback = (disc < DOUBLE_ROOT_TOL) | (spread < SHORT_STEP_TOL)
    if np.any(fallback):
        w_q, c_q = _quadrature_moments(lam[fallback], nu, g[fallback], a[fallback], h)
        weight[fallback] = w_q
        cov[fallback] = c_q
    return ModePropagator(h=h, E=E, weight=weight, cov=cov, chol=psd_cholesky(cov))


# -- steppers -------------------------------------------------------------------

class WaveStepper:
    """Array-level one-step maps for the full and averaged models.

    States are arrays of orthonormal coefficients with modes on the last
    axis; ``z`` carries ``DRAWS_PER_MODE`` standard normals per mode.
    """

    def __init__(self, params):
        self.params = params
        self.h = params.step
        self.lam = params.basis.eigenvalues
        self.b = params.b
        nu, alpha, h, lam = params.nu, params.alpha, self.h, self.lam
        if params.scheme == "stiff-exact":
            self.prop = build_propagator(lam, nu, alpha, self.b, h)
            self.avg_row = self.prop.chol[:, 2, :]
        else:
            self.prop = None
            self.em_std = nu ** (alpha - 1.0) * np.sqrt(self.b * h)
            avg_std = nu**alpha * np.sqrt(self.b * -np.expm1(-2 * lam * h) / (2 * lam))
            self.avg_row = np.zeros((params.K, DRAWS_PER_MODE))
            self.avg_row[:, 0] = avg_std
        self.avg_decay = np.exp(-lam * h)
        self.avg_weight = -np.expm1(-lam * h) / lam

    def full(self, U, V, z):
        p = self.params
        F = p.forcing(U)
        if self.prop is None:
            U_new = U + self.h * V
            V_new = V - (self.h / p.nu) * (V + self.lam * U - F) + self.em_std * z[..., 0]
            return U_new, V_new
        E, w, L = self.prop.E, self.prop.weight, self.prop.chol
        F = F / p.nu
        U_new = E[:, 0, 0] * U + E[:, 0, 1] * V + w[:, 0] * F + L[:, 0, 0] * z[..., 0]
        V_new = (E[:, 1, 0] * U + E[:, 1, 1] * V + w[:, 1] * F
                 + L[:, 1, 0] * z[..., 0] + L[:, 1, 1] * z[..., 1])
        return U_new, V_new

    def averaged(self, U, z):
        F = self.params.forcing(U)
        return self.avg_decay * U + self.avg_weight * F + np.sum(self.avg_row * z, axis=-1)


_stepper_cache = {}


def stepper_for(params):
    key = params
    st = _stepper_cache.get(key)
    if st is None:
        if len(_stepper_cache) > 64:
            _stepper_cache.clear()
        st = _stepper_cache[key] = WaveStepper(params)
    return st


def _normals(rng, shape, noise):
    """Standard normals; rng may be None only for a noise-free model."""
    if rng is None:
        if not np.any(noise.array):
            return np.zeros(shape)
        raise ValueError("an rng is required when the noise is non-zero")
    return standard_normal(rng, shape)


def _draw(rng, K, noise):
    return _normals(rng, (K, DRAWS_PER_MODE), noise)


def _check_finite(arrays, t):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise BlowUpError(t)


def step_wave(state, params, rng):
    st = stepper_for(params)
    z = _draw(rng, params.K, params.noise)
    U, V = st.full(state.u.coeffs, state.v.coeffs, z)
    _check_finite((U, V), st.h)
    return WaveState(SpectralField(state.basis, U), SpectralField(state.basis, V))


def step_averaged(u, params, rng):
    st = stepper_for(params)
    U = st.averaged(u.coeffs, _draw(rng, params.K, params.noise))
    _check_finite((U,), st.h)
    return SpectralField(u.basis, U)


@dataclass
class Trajectory:
    """Recorded samples of one path; ``v`` is None for first-order models."""

    basis: SineBasis
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray = None

    def __len__(self):
        return len(self.times)

    def states(self):
        for i in range(len(self.times)):
            u = SpectralField(self.basis, self.u[i])
            if self.v is None:
                yield u
            else:
                yield WaveState(u, SpectralField(self.basis, self.v[i]))

    @property
    def final(self):
        return list(self.states())[-1] if len(self) else None


def _coeffs(x, K):
    if x is None:
        return np.zeros(K)
    if isinstance(x, SpectralField):
        if x.K != K:
            raise SizingError(f"initial data has K={x.K}, params K={K}")
        return np.array(x.coeffs)
    arr = np.zeros(K)
    x = np.asarray(x, dtype=float)
    if x.size > K:
        raise SizingError("initial data not band-limited to K")
    arr[:x.size] = x
    return arr


def simulate_wave(params, u0, u1, rng, record_every=1):
    st = stepper_for(params)
    K, n = params.K, params.n_steps
    U, V = _coeffs(u0, K), _coeffs(u1, K)
    times, us, vs = [0.0], [U], [V]
    for i in range(1, n + 1):
        U, V = st.full(U, V, _draw(rng, K, params.noise))
        _check_finite((U, V), i * st.h)
        if i % record_every == 0 or i == n:
            times.append(i * st.h)
            us.append(U)
            vs.append(V)
    return Trajectory(params.basis, np.array(times), np.array(us), np.array(vs))


def simulate_averaged(params, u0, rng, record_every=1):
    st = stepper_for(params)
    K, n = params.K, params.n_steps
    U = _coeffs(u0, K)
    times, us = [0.0], [U]
    for i in range(1, n + 1):
        U = st.averaged(U, _draw(rng, K, params.noise))
        _check_finite((U,), i * st.h)
        if i % record_every == 0 or i == n:
            times.append(i * st.h)
            us.append(U)
    return Trajectory(params.basis, np.array(times), np.array(us))


def fast_frozen_mean(u_frozen, beta=0.0, cubic_coeff=1.0):
    """(Delta u + f(u)) in the orthonormal basis: the stationary mean of the fast equation."""
    basis = SineBasis(u_frozen.K)
    u = u_frozen.to(basis).coeffs
    cube = -cubic_array(u, 0.0, Grid.dealiased(basis.K).M, basis.scale)
    return -basis.eigenvalues * u + beta * u - cubic_coeff * cube


def simulate_fast_frozen(u_frozen, nu, noise, T, rng, dt=None, beta=0.0, v0=None, cubic_coeff=1.0):
    """Exact OU simulation of dv = -(1/nu)[v - Delta u - f(u)] dt + nu**-0.5 dW.

    Returns (times, v) with v of shape (n_steps + 1, K).
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    K = u_frozen.K
    dt = nu / 10.0 if dt is None else dt
    n = int(np.ceil(T / dt - 1e-9)) if T > 0 else 0
    h = T / n if n else dt
    m = fast_frozen_mean(u_frozen, beta, cubic_coeff)
    diffusion = np.sqrt(noise.padded(K) / nu)
    v = np.array(m if v0 is None else _coeffs(v0, K))
    out = np.empty((n + 1, K))
    out[0] = v
    for i in range(1, n + 1):
        v = ou_exact_step(v, 1.0 / nu, m, h, diffusion, normal=_normals(rng, K, noise))
        out[i] = v
    return np.arange(n + 1) * h, out


def scale_factor(nu, alpha):
    return nu ** (0.5 - alpha)


def scale_transform(state, nu, alpha, direction="forward"):
    """Multiply (u, v) by nu**(1/2 - alpha) (forward) or divide (backward)."""
    s = scale_factor(nu, alpha)
    if direction == "backward":
        s = 1.0 / s
    elif direction != "forward":
        raise ValueError("direction must be 'forward' or 'backward'")
    return WaveState(state.u * s, state.v * s)


def scaled_params(params):
    """Parameters of the system obeyed by the forward-scaled variables.

    The noise becomes the alpha = 1/2 form and the cubic picks up the
    factor nu**(2 alpha - 1) from f~(u) = s f(u / s).
    """
    s = scale_factor(params.nu, params.alpha)
    return replace(params, alpha=0.5, noise=replace(params.noise, alpha=0.5),
                   cubic_coeff=params.cubic_coeff / s**2)


# -- ensembles ------------------------------------------------------------------

def default_threads():
    try:
        return max(1, int(os.environ.get("AWL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class EnsembleRun:
    """Per-trajectory outputs of :func:`run_ensemble`, in trajectory order."""

    params: WaveParams
    times: np.ndarray
    terminal: dict
    max_h1: dict
    aborted: np.ndarray
    abort_time: np.ndarray
    recorded: dict = field(default_factory=dict)

    @property
    def n_traj(self):
        return self.aborted.size

    @property
    def abort_count(self):
        return int(self.aborted.sum())


def _block_size(n_steps, K, chunk):
    per_traj = min(n_steps, chunk) * K * DRAWS_PER_MODE * 8
    return int(max(8, min(256, 32e6 // max(per_traj, 1))))


def run_ensemble(params, u0, u1, n_traj, seed, models=("wave",), coupling="common-noise",
                 record_every=0, threads=None, purpose="wiener", chunk=256):
    """Simulate ``n_traj`` paths of each requested model.

    Trajectory ``i`` draws from ``derive_stream(seed, i, purpose)``; under
    ``independent`` coupling the averaged model uses a separate purpose.
    Work is split into fixed blocks, so outputs do not depend on
    ``threads``.  Paths that blow up are marked aborted and their outputs
    set to NaN.
    """
    if coupling not in ("common-noise", "independent"):
        raise ValueError(f"unknown coupling {coupling!r}")
    for m in models:
        if m not in ("wave", "averaged"):
            raise ValueError(f"unknown model {m!r}")
    st = stepper_for(params)
    K, n_steps = params.K, params.n_steps
    lam = params.basis.eigenvalues
    U0, V0 = _coeffs(u0, K), _coeffs(u1, K)
    rec_idx = []
    if record_every:
        rec_idx = [0] + [i for i in range(1, n_steps + 1) if i % record_every == 0 or i == n_steps]
    times = np.array(rec_idx, dtype=float) * st.h
    block = _block_size(n_steps, K, chunk)
    starts = list(range(0, n_traj, block))

    def run_block(start):
        ids = range(start, min(start + block, n_traj))
        nb = len(ids)
        gens = [derive_stream(seed, i, purpose) for i in ids]
        avg_gens = gens
        if coupling == "independent" and "averaged" in models and "wave" in models:
            avg_gens = [derive_stream(seed, i, purpose + "-averaged") for i in ids]
        state = {}
        if "wave" in models:
            state["wave"] = [np.tile(U0, (nb, 1)), np.tile(V0, (nb, 1))]
        if "averaged" in models:
            state["averaged"] = [np.tile(U0, (nb, 1))]
        max_h1 = {m: np.full(nb, np.sum(lam * U0**2)) for m in models}
        aborted = np.zeros(nb, bool)
        abort_time = np.full(nb, np.nan)
        rec = {m: [] for m in models} if record_every else {}
        rec_v = []
        if record_every:
            for m in models:
                rec[m].append(state[m][0].copy())
            if "wave" in models:
                rec_v.append(state["wave"][1].copy())
        done = 0
        while done < n_steps:
            c = min(chunk, n_steps - done)
            z = np.stack([g.normal((c, K, DRAWS_PER_MODE)) for g in gens], axis=1)
            za = z if avg_gens is gens else np.stack(
                [g.normal((c, K, DRAWS_PER_MODE)) for g in avg_gens], axis=1)
            for j in range(c):
                i = done + j + 1
                bad = np.zeros(nb, bool)
                if "wave" in models:
                    U, V = st.full(*state["wave"], z[j])
                    state["wave"] = [U, V]
                    bad |= ~np.all(np.isfinite(U), axis=1) | ~np.all(np.isfinite(V), axis=1)
                if "averaged" in models:
                    Ua = st.averaged(state["averaged"][0], za[j])
                    state["averaged"] = [Ua]
                    bad |= ~np.all(np.isfinite(Ua), axis=1)
                new_bad = bad & ~aborted
                if np.any(new_bad):
                    abort_time[new_bad] = i * st.h
                    aborted |= new_bad
                if np.any(aborted):
                    for m in models:
                        for arr in state[m]:
                            arr[aborted] = 0.0
                for m in models:
                    h1 = np.sum(lam * state[m][0] ** 2, axis=1)
                    np.maximum(max_h1[m], h1, out=max_h1[m])
                if record_every and (i % record_every == 0 or i == n_steps):
                    for m in models:
                        rec[m].append(state[m][0].copy())
                    if "wave" in models:
                        rec_v.append(state["wave"][1].copy())
            done += c
        terminal = {}
        for m in models:
            terminal[m] = [arr.copy() for arr in state[m]]
            for arr in terminal[m]:
                arr[aborted] = np.nan
            max_h1[m][aborted] = np.nan
        recs = {m: np.stack(rec[m], axis=1) for m in rec}
        if rec_v:
            recs["wave_v"] = np.stack(rec_v, axis=1)
        for arr in recs.values():
            arr[aborted] = np.nan
        return terminal, max_h1, aborted, abort_time, recs

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(starts) == 1:
        results = [run_block(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_block, starts))

    terminal = {m: [np.concatenate([r[0][m][j] for r in results])
                    for j in range(len(results[0][0][m]))] for m in models}
    max_h1 = {m: np.concatenate([r[1][m] for r in results]) for m in models}
    aborted = np.concatenate([r[2] for r in results])
    abort_time = np.concatenate([r[3] for r in results])
    recorded = {}
    if record_every:
        recorded = {key: np.concatenate([r[4][key] for r in results]) for key in results[0][4]}
    return EnsembleRun(params, times, terminal, max_h1, aborted, abort_time, recorded)
