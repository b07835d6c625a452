"""Stochastic slow manifold of the homotopy system

    u_t = u_xx + u + v
    nu v_t = -v - gamma nu (d_xx + 1) u_t + beta' u - u**3 + sigma W'

on (0, pi) with plain ``sin(kx)`` amplitudes throughout.

Noise enters mode ``k`` as ``sigma * amps[k-1] * dw_k``.  The history
convolutions ``Z_mu dw = int_{-inf}^t exp(-mu (t - s)) dw_s`` and their
iterates are carried by an :class:`OuBank`, one exact linear-Gaussian
cascade per noise mode, so every cross-correlation between channels that
share a Brownian motion is reproduced exactly.  ``Z_{/nu}`` denotes the
convolution at the fast rate ``1/nu``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, stats

from .dynamics import psd_cholesky
from .errors import ConfigError, ExpansionDomainError, TruncationError
from .noise import standard_normal
from .spectral import Grid, Normalization, SineBasis, SpectralField, cubic_f

MIN_MODES = 5


def mu(k):
    """Decay rate k**2 - 1 of the k-th slow-equation mode."""
    if k < 1:
        raise ValueError("mode index starts at 1")
    return float(k * k - 1)


@dataclass(frozen=True)
class SsmParams:
    nu: float
    gamma: float = 1.0
    beta_prime: float = 0.0
    sigma: float = 1.0
    amps: tuple = (1.0, 0.5, 0.25, 0.125, 0.0625)
    K_ssm: int = 5
    radius: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "amps", tuple(float(x) for x in self.amps))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.nu < 1.0:
            raise ValueError(f"nu must lie in [0, 1), got {self.nu}")
        if any(x < 0 for x in self.amps):
            raise ValueError("noise amplitudes must be nonnegative")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def basis(self):
        return SineBasis(self.K_ssm, Normalization.PLAIN)

    def b(self, k):
        """Effective amplitude sigma * amps[k-1] (zero past the list)."""
        return self.sigma * self.amps[k - 1] if 1 <= k <= len(self.amps) else 0.0


# -- OU bank --------------------------------------------------------------------------

def bank_channels(k, K, nu, integrals=False):
    """Channel keys for noise mode ``k`` in a ``K``-mode truncation.

    ``("w",)`` is the Brownian motion itself, ``("Z", r)`` the
    convolution at rate ``r`` and ``("ZZ", outer, inner)`` the iterate
    Z_outer Z_inner dw.  With ``integrals`` each channel also gets an
    ``("I", key)`` running time integral.
    """
    keys = [("w",), ("Z", 1.0 / nu)]
    if k == 1:
        keys.append(("Z", mu(3)))
    else:
        m = mu(k)
        keys += [("Z", m), ("ZZ", m, m)]
        if k - 2 >= 2:
            keys.append(("ZZ", mu(k - 2), m))
        if k + 2 <= K:
            keys.append(("ZZ", mu(k + 2), m))
    if integrals:
        keys += [("I", key) for key in list(keys)]
    return keys


def _generator(keys):
    """Drift matrix A and noise loading g of dx = A x dt + g dw."""
    n = len(keys)
    index = {key: i for i, key in enumerate(keys)}
    A = np.zeros((n, n))
    g = np.zeros(n)
    for i, key in enumerate(keys):
        if key[0] == "w":
            g[i] = 1.0
        elif key[0] == "Z":
            A[i, i] = -key[1]
            g[i] = 1.0
        elif key[0] == "ZZ":
            A[i, i] = -key[1]
            A[i, index[("Z", key[2])]] = 1.0
        elif key[0] == "I":
            A[i, index[key[1]]] = 1.0
    return A, g


def _van_loan(A, g, h):
    """(exp(A h), int_0^h e^{As} g g^T e^{A^T s} ds), with step halving for stiff A."""
    n = A.shape[0]
    norm = np.max(np.abs(A)) * h
    m = int(max(0, np.ceil(np.log2(norm)))) if norm > 1 else 0
    hs = h / 2**m
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = -A
    block[:n, n:] = np.outer(g, g)
    block[n:, n:] = A.T
    F = linalg.expm(block * hs)
    E = F[n:, n:].T
    Q = E @ F[:n, n:]
    for _ in range(m):
        Q = Q + E @ Q @ E.T
        E = E @ E
    return E, 0.5 * (Q + Q.T)


def cascade_weights(mu_outer, mu_inner, h):
    """Closed-form deterministic step of the cascade (z1, z2).

    dz1 = -mu_inner z1 dt, dz2 = (-mu_outer z2 + z1) dt.  Returns
    (e^{-mu_inner h}, e^{-mu_outer h}, coupling) with
    z2(h) = e^{-mu_outer h} z2 + coupling * z1.
    """
    d1, d2 = np.exp(-mu_inner * h), np.exp(-mu_outer * h)
    gap = mu_outer - mu_inner
    if abs(gap) * h < 1e-8:
        coupling = h * np.exp(-0.5 * (mu_outer + mu_inner) * h)
    else:
        coupling = (d1 - d2) / gap
    return d1, d2, coupling


class OuBank:
    """Exactly sampled history convolutions for noise modes 1..K.

    ``state`` has shape (K, n_channels); modes with fewer channels are
    zero-padded.  ``dw`` holds the Brownian increments of the last step
    and ``h`` its length.
    """

    def __init__(self, nu, K, state=None, integrals=False, t=0.0):
        if not nu > 0:
            raise ValueError("the fast convolution rate 1/nu needs nu > 0")
        self.nu = float(nu)
        self.K = int(K)
        self.integrals = integrals
        self.keys = [bank_channels(k, K, nu, integrals) for k in range(1, K + 1)]
        self.n = max(len(k) for k in self.keys)
        self.index = [{key: i for i, key in enumerate(ks)} for ks in self.keys]
        self.state = np.zeros((self.K, self.n)) if state is None else np.array(state, dtype=float)
        self.dw = np.zeros(self.K)
        self.h = 0.0
        self.t = t
        self._cache = {}

    def _generators(self):
        A = np.zeros((self.K, self.n, self.n))
        g = np.zeros((self.K, self.n))
        for k, keys in enumerate(self.keys):
            a, gg = _generator(keys)
            A[k, :len(keys), :len(keys)] = a
            g[k, :len(keys)] = gg
        return A, g

    def transition(self, h):
        """Per-mode (E, chol) for step ``h``, cached."""
        hit = self._cache.get(h)
        if hit is None:
            A, g = self._generators()
            E = np.zeros_like(A)
            Q = np.zeros_like(A)
            for k in range(self.K):
                E[k], Q[k] = _van_loan(A[k], g[k], h)
            hit = self._cache[h] = (E, psd_cholesky(Q), Q)
        return hit[0], hit[1]

    @classmethod
    def stationary(cls, nu, K, rng, integrals=False):
        """Bank with convolutions drawn from their joint stationary law; w = 0."""
        bank = cls(nu, K, integrals=integrals)
        A, g = bank._generators()
        for k, keys in enumerate(bank.keys):
            stable = [i for i, key in enumerate(keys) if key[0] in ("Z", "ZZ")]
            As = A[k][np.ix_(stable, stable)]
            gs = g[k][stable]
            P = linalg.solve_continuous_lyapunov(As, -np.outer(gs, gs))
            L = psd_cholesky(0.5 * (P + P.T))
            bank.state[k, stable] = L @ standard_normal(rng, len(stable))
        return bank

    def copy(self):
        other = OuBank.__new__(OuBank)
        other.__dict__.update(self.__dict__)
        other.state = self.state.copy()
        other.dw = self.dw.copy()
        return other

    def step(self, h, rng=None, normals=None):
        """Advance by ``h`` in place; returns self."""
        if not h > 0:
            raise ValueError("step must be positive")
        E, L = self.transition(h)
        if normals is None:
            normals = standard_normal(rng, (self.K, self.n))
        new = np.einsum("kij,kj->ki", E, self.state) + np.einsum("kij,kj->ki", L, normals)
        w = [idx[("w",)] for idx in self.index]
        self.dw = new[np.arange(self.K), w] - self.state[np.arange(self.K), w]
        self.state = new
        self.h = h
        self.t += h
        return self

    def get(self, k, key):
        """State of channel ``key`` for noise mode ``k`` (0 if absent)."""
        if k > self.K:
            return 0.0
        i = self.index[k - 1].get(key)
        return 0.0 if i is None else float(self.state[k - 1, i])

    def z(self, k, rate):
        return self.get(k, ("Z", float(rate)))

    def zz(self, k, outer, inner):
        return self.get(k, ("ZZ", float(outer), float(inner)))

    def fast(self, k):
        return self.get(k, ("Z", 1.0 / self.nu))

    def w(self, k):
        return self.get(k, ("w",))

    def increment(self, k):
        return float(self.dw[k - 1]) if k <= self.K else 0.0


@dataclass
class Increments:
    """Supplied Brownian increments dw_k (k = 1, 2, ...) over a step of length h."""

    h: float
    dw: tuple

    def increment(self, k):
        return float(self.dw[k - 1]) if k <= len(self.dw) else 0.0


def ou_bank_step(bank, h, rng=None, normals=None):
    """Copy of ``bank`` advanced by one exact step."""
    return bank.copy().step(h, rng=rng, normals=normals)


# -- slow SDE ---------------------------------------------------------------------------

def slow_coefficients(a, nu, beta_prime):
    """(drift, c1, c3, c5): da = drift dt + c1 b1 dw1 + c3 b3 dw3 + c5 b5 dw5."""
    a2 = a * a
    a4 = a2 * a2
    drift = beta_prime * a - 0.75 * a * a2
    c1 = 1.0 - 2.0 * nu * beta_prime + 4.5 * nu * a2 - (9.0 / 1024.0) * a4
    c3 = (3.0 / 32.0 + (3.0 / 128.0) * beta_prime) * a2 - (21.0 / 1024.0) * a4
    c5 = (5.0 / 1024.0) * a4
    return drift, c1, c3, c5


def _slow_increment(a, nu, params, bank):
    if abs(a) > params.radius:
        raise ExpansionDomainError(f"|a| = {abs(a):.3g} exceeds the expansion radius {params.radius}")
    drift, c1, c3, c5 = slow_coefficients(a, nu, params.beta_prime)
    return (drift * bank.h
            + c1 * params.b(1) * bank.increment(1)
            + c3 * params.b(3) * bank.increment(3)
            + c5 * params.b(5) * bank.increment(5))


def ssm_drift_diffusion(a, params, bank):
    """Increment of the slow amplitude over the bank's last step.

    Only ``bank.h`` and the raw increments ``bank.increment(k)`` are read,
    so an :class:`OuBank` or plain :class:`Increments` both work.
    """
    return _slow_increment(a, params.nu, params, bank)


def averaged_ssm_drift_diffusion(a_bar, params, bank):
    """Slow increment of the averaged model: the same expansion with nu = 0."""
    return _slow_increment(a_bar, 0.0, params, bank)


def ssm_field(a, params, bank):
    """Shape of the stochastic slow manifold at amplitude ``a`` (plain sin kx)."""
    K = params.K_ssm
    if K < MIN_MODES:
        raise TruncationError(f"slow-manifold field needs K_ssm >= {MIN_MODES}, got {K}")
    nu, gam, bp = params.nu, params.gamma, params.beta_prime
    b = params.b
    a2 = a * a
    c = np.zeros(K)
    c[0] += a - (3.0 / 32.0) * a2 * b(3) * bank.z(3, mu(3))
    c[2] += a**3 / 32.0 - (3.0 / 32.0) * a2 * b(1) * bank.z(1, mu(3))
    for k in range(1, K + 1):
        c[k - 1] -= b(k) * bank.fast(k)
        if k < 2:
            continue
        m = mu(k)
        zz_kk = bank.zz(k, m, m)
        c[k - 1] += b(k) * ((1.0 + m * nu + gam * nu * m) * bank.z(k, m) - gam * nu * m * m * zz_kk)
        c[k - 1] += bp * b(k) * zz_kk
        # cubic coupling of the slow mode to noise modes k and k+2
        c[k - 1] += 0.75 * a2 * (b(k + 2) * bank.zz(k + 2, m, mu(k + 2)) - 2.0 * b(k) * zz_kk)
        if k + 2 <= K:
            c[k + 1] += 0.75 * a2 * b(k) * bank.zz(k, mu(k + 2), m)
    return SpectralField(params.basis, c)


def slow_sde_path(params, a0, T, h, rng, averaged=False, bank=None):
    """Euler-Maruyama path of the slow SDE driven by an exact OU bank.

    Returns (times, a, bank) where ``bank`` is the final bank state.
    """
    n = int(np.ceil(T / h - 1e-9)) if T > 0 else 0
    h = T / n if n else h
    bank = bank or OuBank.stationary(params.nu, max(params.K_ssm, 5), rng)
    incr = averaged_ssm_drift_diffusion if averaged else ssm_drift_diffusion
    a = np.empty(n + 1)
    a[0] = a0
    for i in range(1, n + 1):
        bank.step(h, rng)
        a[i] = a[i - 1] + incr(a[i - 1], params, bank)
    return np.arange(n + 1) * h, a, bank


# -- homotopy system --------------------------------------------------------------------

def homotopy_rhs(u, v, params, grid=None):
    """Drift of (eq:u, eq:v) with eq:u's u_t substituted into the gamma term."""
    if u.basis != v.basis:
        raise ValueError("u and v must share a basis")
    basis = u.basis
    grid = grid or Grid.dealiased(basis.K)
    m = basis.eigenvalues - 1.0
    u_t = SpectralField(basis, -m * u.coeffs + v.coeffs)
    f = cubic_f(u, params.beta_prime, grid)
    v_t = SpectralField(
        basis,
        (-v.coeffs + params.gamma * params.nu * m * u_t.coeffs + f.coeffs) / params.nu,
    )
    return u_t, v_t


def manifold_state(a, params):
    """Deterministic slow-manifold point (u, v) at amplitude ``a``, plain basis."""
    basis = params.basis
    u = np.zeros(basis.K)
    u[0], u[2] = a, a**3 / 32.0
    adot = params.beta_prime * a - 0.75 * a**3
    u_t = np.zeros(basis.K)
    u_t[0], u_t[2] = adot, (3.0 / 32.0) * a * a * adot
    v = u_t + (basis.eigenvalues - 1.0) * u
    return SpectralField(basis, u), SpectralField(basis, v)


def simulate_homotopy(params, u0, v0, T, t_eval=None, rtol=1e-10, atol=1e-13):
    """Noise-free integration of the homotopy system (stiff implicit solver).

    Returns (times, u, v) with coefficient arrays of shape (n_t, K_ssm).
    """
    basis = params.basis
    grid = Grid.dealiased(basis.K)
    K = basis.K

    def rhs(t, y):
        u = SpectralField(basis, y[:K])
        v = SpectralField(basis, y[K:])
        ut, vt = homotopy_rhs(u, v, params, grid)
        return np.concatenate([ut.coeffs, vt.coeffs])

    y0 = np.concatenate([u0.coeffs, v0.coeffs])
    sol = integrate.solve_ivp(rhs, (0.0, T), y0, method="Radau", t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.t, sol.y[:K].T, sol.y[K:].T


def normal_form_amplitude(a0, beta_prime, t):
    """Exact solution of a' = beta' a - (3/4) a**3."""
    t = np.asarray(t, dtype=float)
    if beta_prime == 0.0:
        return a0 / np.sqrt(1.0 + 1.5 * a0 * a0 * t)
    g = np.exp(2.0 * beta_prime * t)
    return a0 * np.exp(beta_prime * t) / np.sqrt(1.0 + 0.75 * a0 * a0 * (g - 1.0) / beta_prime)


# -- residuals --------------------------------------------------------------------------

@dataclass
class ResidualReport:
    mode: str
    values: np.ndarray
    residuals: np.ndarray
    slope: float
    intercept: float
    r2: float
    extra: dict = field(default_factory=dict)


def _loglog(x, y):
    fit = stats.linregress(np.log(x), np.log(y))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue**2)


def deterministic_residual(a, params, n_points=4001):
    """sup_x of nu u_tt + u_t - u_xx - (1+beta') u + u**3 on the manifold.

    Uses u = a sin x + a**3/32 sin 3x with a' = beta' a - (3/4) a**3,
    evaluated pointwise on a fine grid.
    """
    x = np.linspace(0.0, np.pi, n_points)
    s1, s3 = np.sin(x), np.sin(3 * x)
    bp = params.beta_prime
    adot = bp * a - 0.75 * a**3
    addot = (bp - 2.25 * a * a) * adot
    u = a * s1 + a**3 / 32.0 * s3
    u_a = s1 + (3.0 / 32.0) * a * a * s3
    u_aa = (3.0 / 16.0) * a * s3
    u_t = u_a * adot
    u_tt = u_aa * adot**2 + u_a * addot
    u_xx = -a * s1 - (9.0 / 32.0) * a**3 * s3
    r = params.nu * u_tt + u_t - u_xx - (1.0 + bp) * u + u**3
    return float(np.max(np.abs(r)))


def _window(t, H):
    """sin^4 bump on [0, H] and its first two derivatives."""
    w = np.pi / H
    s, c = np.sin(w * t), np.cos(w * t)
    psi = s**4
    dpsi = 4.0 * w * s**3 * c
    ddpsi = w * w * (12.0 * s * s * c * c - 4.0 * s**4)
    return psi, dpsi, ddpsi


def linear_noise_coefficients(params):
    """Manifold u_k at a = 0, beta' = 0 as weights on bank channels.

    Returns, per mode k, a dict channel-key -> weight (already including
    sigma * amps).  Mode 1 carries the slow amplitude a = b_1 w_1.
    """
    nu, gam = params.nu, params.gamma
    out = []
    for k in range(1, params.K_ssm + 1):
        bk = params.b(k)
        wts = {("Z", 1.0 / nu): -bk}
        if k == 1:
            wts[("w",)] = bk
        else:
            m = mu(k)
            wts[("Z", m)] = bk * (1.0 + m * nu + gam * nu * m)
            wts[("ZZ", m, m)] = -bk * gam * nu * m * m
        out.append(wts)
    return out


def linear_noise_residual(params, rng, h_nu=0.05, window=1.0, n_windows=32):
    """Time-averaged RMS of the weak residual of the linear noise problem.

    Eliminating v, mode k obeys nu u'' + (1 + (1-gamma) nu mu_k) u' + mu_k u
    = b_k w_k'.  For each window [t0, t0 + H] and the smooth bump psi the
    residual is

        R_k = int (nu psi'' - c_k psi' + mu_k psi) u_k dt + b_k int psi' w_k dt,

    which vanishes for the exact solution.  The step is ``h_nu * nu``.
    Time integrals use exactly
    sampled per-step integrals of every bank channel.  Returns the RMS over
    windows of the L2(0, pi) norm of the residual field.
    """
    if params.beta_prime != 0.0:
        raise ConfigError("linear-noise residual requires beta' = 0")
    nu = params.nu
    h = h_nu * nu
    K = params.K_ssm
    steps_per_window = int(round(window / h))
    h = window / steps_per_window
    bank = OuBank.stationary(nu, K, rng, integrals=True)
    weights = linear_noise_coefficients(params)
    lin = np.zeros((K, bank.n))
    noise = np.zeros((K, bank.n))
    for k in range(K):
        for key, wt in weights[k].items():
            lin[k, bank.index[k][("I", key)]] += wt
        noise[k, bank.index[k][("I", ("w",))]] = params.b(k + 1)
    mus = np.array([mu(k) for k in range(1, K + 1)])
    damp = 1.0 + (1.0 - params.gamma) * nu * mus
    tm = (np.arange(steps_per_window) + 0.5) * h
    psi, dpsi, ddpsi = _window(tm, window)
    G = nu * ddpsi[:, None] - damp[None, :] * dpsi[:, None] + mus[None, :] * psi[:, None]
    sq = np.zeros(n_windows)
    for j in range(n_windows):
        prev = bank.state.copy()
        seg_u = np.empty((steps_per_window, K))
        seg_w = np.empty((steps_per_window, K))
        for i in range(steps_per_window):
            bank.step(h, rng)
            delta = bank.state - prev
            prev = bank.state
            seg_u[i] = np.sum(lin * delta, axis=1)
            seg_w[i] = np.sum(noise * delta, axis=1)
        R = np.sum(G * seg_u, axis=0) + np.sum(dpsi[:, None] * seg_w, axis=0)
        sq[j] = 0.5 * np.pi * np.sum(R**2)
    return float(np.sqrt(sq.mean())), sq


def residual_check(mode, params, values, rng=None, **kw):
    """Residual norms over ``values`` (amplitudes or nus) with a log-log slope."""
    from dataclasses import replace

    values = np.asarray(values, dtype=float)
    if mode == "deterministic":
        if params.sigma != 0.0:
            raise ConfigError("deterministic residual requires sigma = 0")
        res = np.array([deterministic_residual(a, params, **kw) for a in values])
    elif mode == "linear-noise":
        if params.beta_prime != 0.0:
            raise ConfigError("linear-noise residual requires beta' = 0")
        if params.sigma == 0.0:
            raise ConfigError("linear-noise residual requires sigma > 0")
        if rng is None:
            raise ConfigError("linear-noise residual needs a random stream")
        res = []
        for nu in values:
            rms, _ = linear_noise_residual(replace(params, nu=float(nu)), rng, **kw)
            res.append(rms / params.sigma)
        res = np.array(res)
    else:
        raise ConfigError(f"unknown residual mode {mode!r}")
    slope, intercept, r2 = _loglog(values, res)
    return ResidualReport(mode, values, res, slope, intercept, r2)
