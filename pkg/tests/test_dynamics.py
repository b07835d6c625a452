from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, linalg

from wavelab.dynamics import (WaveParams, WaveState, _closed_form_moments, _quadrature_moments,
                              build_propagator, default_threads, fast_frozen_mean, mode_eigenvalues,
                              run_ensemble, scale_factor, scale_transform, scaled_params,
                              simulate_averaged, simulate_fast_frozen, simulate_wave, step_wave,
                              transition_matrix)
from wavelab.errors import BlowUpError
from wavelab.noise import NoiseModel, derive_stream
from wavelab.spectral import SineBasis, SpectralField


def generator(lam, nu):
    return np.array([[0.0, 1.0], [-lam / nu, -1.0 / nu]])


def van_loan(A, G, h):
    """(exp(Ah), int_0^h e^{As} G G^T e^{A^T s} ds) for a short step."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = np.outer(G, G)
    M[n:, n:] = A.T
    F = linalg.expm(M * h)
    E = F[n:, n:].T
    return E, E @ F[:n, n:]


def joint_generator(lam, nu, alpha, b):
    """3-state system (u, v, averaged u) driven by one dw."""
    A = np.zeros((3, 3))
    A[:2, :2] = generator(lam, nu)
    A[2, 2] = -lam
    G = np.array([0.0, nu ** (alpha - 1) * np.sqrt(b), nu**alpha * np.sqrt(b)])
    return A, G


def params(**kw):
    base = dict(nu=0.05, noise=NoiseModel.power_law(4), K=4, dt=0.01, T=0.1, beta=1.0)
    base.update(kw)
    return WaveParams(**base)


class TestParams:
    def test_em_guard(self):
        with pytest.raises(ValueError):
            params(scheme="euler-maruyama", dt=0.01)
        params(scheme="euler-maruyama", dt=0.05 / 20)

    def test_validation(self):
        with pytest.raises(ValueError):
            params(nu=0.0)
        with pytest.raises(ValueError):
            params(alpha=0.7)
        with pytest.raises(ValueError):
            params(scheme="rk4")

    def test_steps(self):
        p = params(T=0.1, dt=0.03)
        assert p.n_steps == 4 and p.step == pytest.approx(0.025)
        assert params(T=0.0).n_steps == 0

    def test_alpha_propagates_to_noise(self):
        assert params(alpha=0.0).noise.alpha == 0.0


class TestPropagator:
    def test_eigenvalue_example(self):
        rp, rm = mode_eigenvalues(1.0, 0.01)
        assert rp.real == pytest.approx(-1.0102, abs=1e-4)
        assert rm.real == pytest.approx(-98.99, abs=1e-2)

    @given(st.floats(1, 400), st.floats(1e-3, 1.0), st.floats(1e-4, 0.5))
    def test_transition_matches_expm(self, lam, nu, h):
        E = transition_matrix(lam, nu, h)
        ref = linalg.expm(generator(lam, nu) * h)
        assert np.allclose(E, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())

    @pytest.mark.parametrize("offset", [0.0, 1e-9, -1e-9, 5e-7, -5e-7])
    def test_double_root_series(self, offset):
        nu = 0.01
        lam = (1 - offset) / (4 * nu)
        E = transition_matrix(lam, nu, 0.003)
        assert np.allclose(E, linalg.expm(generator(lam, nu) * 0.003), rtol=1e-10, atol=1e-12)

    @given(st.sampled_from([1.0, 4.0, 9.0, 49.0, 400.0]), st.sampled_from([0.005, 0.02, 0.1, 1.0]),
           st.floats(1e-3, 0.05))
    def test_semigroup(self, lam, nu, h):
        p1 = build_propagator(lam, nu, 0.5, 1.0, h)
        p2 = build_propagator(lam, nu, 0.5, 1.0, h / 2)
        E2 = p2.E[0]
        assert np.allclose(E2 @ E2, p1.E[0], rtol=1e-10, atol=1e-13)
        S2 = p2.sigma[0]
        composed = E2 @ S2 @ E2.T + S2
        assert np.allclose(composed, p1.sigma[0], rtol=1e-8, atol=1e-14 * max(1, np.abs(p1.sigma).max()))

    @pytest.mark.parametrize("lam,nu,h,alpha", [
        (1.0, 0.01, 1e-3, 0.5), (9.0, 0.02, 5e-3, 0.5), (64.0, 0.05, 1e-3, 0.0),
        (25.0, 0.01, 2e-3, 0.25), (1.0, 0.5, 0.05, 0.5), (12.5, 0.02, 1e-3, 0.5),
    ])
    def test_joint_covariance_van_loan(self, lam, nu, h, alpha):
        b = 0.3
        prop = build_propagator(lam, nu, alpha, b, h)
        A, G = joint_generator(lam, nu, alpha, b)
        E, Q = van_loan(A, G, h)
        assert np.allclose(prop.E[0], E[:2, :2], rtol=1e-9, atol=1e-12)
        assert np.allclose(prop.cov[0], Q, rtol=1e-7, atol=1e-12 * np.abs(Q).max())

    @pytest.mark.parametrize("lam,nu", [(1.0, 0.01), (4.0, 0.005), (100.0, 0.04)])
    def test_long_step_lyapunov(self, lam, nu):
        b, h = 0.7, 1.0
        prop = build_propagator(lam, nu, 0.5, b, h)
        A, G = joint_generator(lam, nu, 0.5, b)
        P = linalg.solve_continuous_lyapunov(A, -np.outer(G, G))
        E = linalg.expm(A * h)
        Q = P - E @ P @ E.T
        assert np.allclose(prop.cov[0], Q, rtol=1e-6, atol=1e-12)

    def test_stationary_v_variance(self):
        # h -> infinity: v-marginal b nu^{2 alpha - 1} / 2
        for alpha in (0.5, 0.25):
            prop = build_propagator(9.0, 0.02, alpha, 0.4, 20.0)
            assert prop.cov[0, 1, 1] == pytest.approx(0.4 * 0.02 ** (2 * alpha - 1) / 2, rel=1e-10)

    def test_zero_noise(self):
        prop = build_propagator([1.0, 4.0], 0.02, 0.5, 0.0, 0.01)
        assert np.all(prop.cov == 0) and np.all(prop.chol == 0)

    def test_forcing_weight_quadrature(self):
        lam, nu, h = 16.0, 0.03, 0.004
        prop = build_propagator(lam, nu, 0.5, 1.0, h)
        ref = integrate.quad_vec(lambda s: transition_matrix(lam, nu, s)[..., :, 1].ravel(), 0, h,
                                 epsrel=1e-13)[0]
        assert np.allclose(prop.weight[0], ref, rtol=1e-9)

    def test_closed_form_and_quadrature_agree(self):
        lam, nu, h = 9.0, 0.01, 0.01
        g, a = nu**-0.5, nu**0.5
        w1, c1 = _closed_form_moments(np.array([lam]), nu, g, a, h)
        w2, c2 = _quadrature_moments(np.array([lam]), nu, g, a, h)
        assert np.allclose(w1, w2, rtol=1e-9)
        assert np.allclose(c1, c2, rtol=1e-8)

    def test_psd_and_damped(self):
        prop = build_propagator(np.arange(1, 33) ** 2.0, 0.01, 0.5, 1.0, 0.01)
        assert np.all(np.abs(np.linalg.eigvals(prop.E)) < 1)
        assert np.all(np.linalg.eigvalsh(prop.cov) > -1e-14)
        assert np.allclose(prop.chol @ np.swapaxes(prop.chol, -1, -2), prop.cov, atol=1e-13)


class TestSingleTrajectory:
    def test_T_zero(self):
        tr = simulate_wave(params(T=0.0), [1.0], None, derive_stream(0, 0, "w"))
        assert len(tr) == 1 and tr.u[0, 0] == 1.0

    def test_equilibrium(self):
        p = params(noise=NoiseModel((0.0,) * 4))
        tr = simulate_wave(p, None, None, derive_stream(0, 0, "w"))
        assert np.all(tr.u == 0) and np.all(tr.v == 0)

    def test_linear_semigroup_steps(self):
        lin = dict(beta=0.0, cubic_coeff=0.0, noise=NoiseModel((0.0,) * 4), T=0.02)
        u0, u1 = [1.0, -0.5, 0.2, 0.1], [0.3, 0.0, -1.0, 2.0]
        one = simulate_wave(params(dt=0.02, **lin), u0, u1, None).final
        two = simulate_wave(params(dt=0.01, **lin), u0, u1, None).final
        assert np.allclose(one.u.coeffs, two.u.coeffs, atol=1e-13)
        assert np.allclose(one.v.coeffs, two.v.coeffs, atol=1e-12)

    def test_damped_oscillation_exact(self):
        nu, lam, T = 0.05, 16.0, 0.37
        p = params(nu=nu, beta=0.0, cubic_coeff=0.0, noise=NoiseModel((0.0,) * 4), T=T, dt=0.05)
        tr = simulate_wave(p, [0, 0, 0, 1.0], None, None)
        ref = linalg.expm(generator(lam, nu) * T) @ [1.0, 0.0]
        assert tr.u[-1, 3] == pytest.approx(ref[0], abs=1e-13)

    def test_step_wave(self):
        p = params()
        b = p.basis
        s = WaveState(SpectralField.mode(b, 1), SpectralField.zeros(b))
        a = step_wave(s, p, derive_stream(3, 0, "w"))
        c = step_wave(s, p, derive_stream(3, 0, "w"))
        assert a.u == c.u and a.v == c.v

    def test_rng_required_with_noise(self):
        with pytest.raises(ValueError):
            simulate_wave(params(), [1.0], None, None)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_blow_up(self):
        p = params(cubic_coeff=-1.0, beta=5.0, T=5.0, dt=0.01)
        with pytest.raises(BlowUpError) as exc:
            simulate_wave(p, [3.0], None, derive_stream(0, 0, "w"))
        assert 0 < exc.value.time <= 5.0

    def test_record_every(self):
        tr = simulate_wave(params(T=0.1, dt=0.01), [1.0], None, derive_stream(0, 0, "w"), record_every=3)
        assert np.allclose(tr.times, [0, 0.03, 0.06, 0.09, 0.1])


class TestAveraged:
    def test_heat_decay(self):
        p = params(beta=0.0, cubic_coeff=0.0, noise=NoiseModel((0.0,) * 4), T=0.3, dt=0.1)
        tr = simulate_averaged(p, [1, 1, 1, 1], None)
        assert np.allclose(tr.u[-1], np.exp(-np.arange(1, 5) ** 2 * 0.3), rtol=1e-13)

    def test_stationary_variance(self):
        nu = 0.02
        p = params(nu=nu, beta=0.0, cubic_coeff=0.0, noise=NoiseModel((0.5, 0.5)), K=2, T=20.0, dt=20.0)
        rows = run_ensemble(p, None, None, 4000, 1, models=("averaged",)).terminal["averaged"][0]
        assert rows.var(axis=0) == pytest.approx(nu * 0.5 / (2 * np.array([1.0, 4.0])), rel=0.07)

    def test_alpha_zero_full_strength(self):
        p = params(alpha=0.0, beta=0.0, cubic_coeff=0.0, noise=NoiseModel((1.0,), alpha=0.0), K=1,
                   T=30.0, dt=30.0)
        rows = run_ensemble(p, None, None, 4000, 2, models=("averaged",)).terminal["averaged"][0]
        assert rows.var() == pytest.approx(0.5, rel=0.07)


class TestFastFrozen:
    def test_noise_off_relaxation(self):
        nu = 0.02
        u = SpectralField.mode(SineBasis(3), 1, 0.5)
        m = fast_frozen_mean(u, beta=1.0)
        t, v = simulate_fast_frozen(u, nu, NoiseModel((0.0,) * 3), 0.1, None, dt=0.01, beta=1.0,
                                    v0=[0, 0, 0])
        assert np.allclose(v, m * -np.expm1(-t[:, None] / nu), atol=1e-13)

    def test_mean_oracle(self):
        u = SpectralField.mode(SineBasis(3), 1, 1.0)
        assert fast_frozen_mean(u, beta=1.0)[0] == pytest.approx(-1 + 1 - 3 / (2 * np.pi))

    def test_autocorrelation_time(self):
        nu = 0.01
        u = SpectralField.zeros(SineBasis(1))
        t, v = simulate_fast_frozen(u, nu, NoiseModel((1.0,)), 2000 * nu, derive_stream(1, 0, "f"),
                                    dt=nu / 5)
        x = v[:, 0] - v[:, 0].mean()
        rho = np.dot(x[1:], x[:-1]) / np.dot(x, x)
        assert -(nu / 5) / np.log(rho) == pytest.approx(nu, rel=0.1)


class TestScaling:
    def test_factors(self):
        assert scale_factor(0.3, 0.5) == 1.0
        assert scale_factor(0.04, 0.0) == pytest.approx(0.2)

    def test_roundtrip(self):
        b = SineBasis(3)
        s = WaveState(SpectralField(b, [1, 2, 3]), SpectralField(b, [-1, 0, 1]))
        back = scale_transform(scale_transform(s, 0.04, 0.1), 0.04, 0.1, "backward")
        assert np.allclose(back.u.coeffs, s.u.coeffs) and np.allclose(back.v.coeffs, s.v.coeffs)
        with pytest.raises(ValueError):
            scale_transform(s, 0.04, 0.1, "sideways")

    def test_simulate_then_scale(self):
        nu, alpha = 0.04, 0.0
        p = params(nu=nu, alpha=alpha, beta=0.0, cubic_coeff=0.0, noise=NoiseModel.power_law(4, alpha=0.0))
        u0, u1 = np.array([1.0, 0.5, 0, 0]), np.array([0, 0.2, 0, 0])
        tr = simulate_wave(p, u0, u1, derive_stream(5, 0, "w"))
        s = scale_factor(nu, alpha)
        q = scaled_params(p)
        tr2 = simulate_wave(q, s * u0, s * u1, derive_stream(5, 0, "w"))
        assert np.max(np.abs(s * tr.u - tr2.u)) < 1e-10
        assert np.max(np.abs(s * tr.v - tr2.v)) < 1e-10

    def test_scaled_cubic(self):
        p = params(nu=0.04, alpha=0.0, noise=NoiseModel.power_law(4, alpha=0.0))
        q = scaled_params(p)
        u = np.array([0.3, 0.1, 0.0, -0.2])
        s = scale_factor(0.04, 0.0)
        assert np.allclose(q.forcing(s * u), s * p.forcing(u), atol=1e-14)


class TestEnsemble:
    def test_matches_single_path(self):
        p = params()
        run = run_ensemble(p, [1.0], None, 5, 42, record_every=1)
        for i in (0, 3):
            tr = simulate_wave(p, [1.0], None, derive_stream(42, i, "wiener"))
            assert np.allclose(run.recorded["wave"][i], tr.u, atol=1e-13)
            assert np.allclose(run.recorded["wave_v"][i], tr.v, atol=1e-11)

    def test_thread_invariance(self):
        p = params(T=0.05)
        a = run_ensemble(p, [1.0], None, 600, 9, models=("wave", "averaged"), threads=1)
        b = run_ensemble(p, [1.0], None, 600, 9, models=("wave", "averaged"), threads=3)
        for m in ("wave", "averaged"):
            assert np.array_equal(a.terminal[m][0], b.terminal[m][0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_aborts_reported(self):
        p = params(cubic_coeff=-1.0, beta=5.0, T=3.0, dt=0.01)
        run = run_ensemble(p, [3.0], None, 8, 0)
        assert run.abort_count == 8
        assert np.all(np.isnan(run.terminal["wave"][0]))
        assert np.all(np.isfinite(run.abort_time))

    def test_common_noise_averaged_row(self):
        # averaged model alone and in a coupled run see the same draws
        p = params()
        a = run_ensemble(p, [1.0], None, 10, 3, models=("averaged",))
        b = run_ensemble(p, [1.0], None, 10, 3, models=("wave", "averaged"))
        assert np.array_equal(a.terminal["averaged"][0], b.terminal["averaged"][0])
        c = run_ensemble(p, [1.0], None, 10, 3, models=("wave", "averaged"), coupling="independent")
        assert not np.array_equal(a.terminal["averaged"][0], c.terminal["averaged"][0])

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            run_ensemble(params(), None, None, 2, 0, models=("heat",))
        with pytest.raises(ValueError):
            run_ensemble(params(), None, None, 2, 0, coupling="shared")

    def test_default_threads(self, monkeypatch):
        monkeypatch.setenv("AWL_THREADS", "3")
        assert default_threads() == 3
        monkeypatch.setenv("AWL_THREADS", "x")
        assert default_threads() == 1

    def test_moments_stable_across_nu(self):
        means = []
        for nu in (0.04, 0.01):
            run = run_ensemble(params(nu=nu, T=0.2, dt=0.002, K=4), [1.0], None, 256, 4)
            means.append(np.mean(run.max_h1["wave"]))
        assert max(means) / min(means) < 2
