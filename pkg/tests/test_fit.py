import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from nersae.core import AreaSample, SampleData
from nersae.fit import (
    ConvergenceError,
    Method,
    MomentSource,
    RankDeficiencyError,
    asymptotic_covariance,
    fit,
    fit_ml,
    fit_reml,
    gls_beta,
    profile_objective,
    variance_component_information_inverse,
)

from conftest import anova_reml, balanced_oneway, random_sample


def dense_blocks(sample, s2a, s2e):
    X = [a.design() for a in sample.areas]
    V = [s2e * np.eye(a.n) + s2a * np.ones((a.n, a.n)) for a in sample.areas]
    return X, V, [a.y for a in sample.areas]


def dense_gls(sample, s2a, s2e):
    X, V, Y = dense_blocks(sample, s2a, s2e)
    A = sum(x.T @ np.linalg.inv(v) @ x for x, v in zip(X, V))
    b = sum(x.T @ np.linalg.inv(v) @ y for x, v, y in zip(X, V, Y))
    return np.linalg.solve(A, b), np.linalg.inv(A)


def dense_loglik(sample, s2a, s2e, reml):
    """Normal (restricted) log-likelihood from explicit covariance matrices."""
    X, V, Y = dense_blocks(sample, s2a, s2e)
    beta, covb = dense_gls(sample, s2a, s2e)
    ll = 0.0
    for x, v, y in zip(X, V, Y):
        r = y - x @ beta
        ll -= 0.5 * (np.linalg.slogdet(v)[1] + r @ np.linalg.solve(v, r))
    n, p = sample.n, sample.p
    if reml:
        ll -= 0.5 * np.linalg.slogdet(np.linalg.inv(covb))[1]
        ll -= 0.5 * (n - p) * np.log(2 * np.pi)
    else:
        ll -= 0.5 * n * np.log(2 * np.pi)
    return ll


class TestGLS:
    def test_ols_at_zero_variance(self, rng):
        s = random_sample(rng, g=6)
        _, Z, y = s.stacked()
        ols = np.linalg.lstsq(Z, y, rcond=None)[0]
        b, _ = gls_beta(s, 0.0, 3.0)
        np.testing.assert_allclose(b, ols, rtol=1e-10, atol=1e-10)

    def test_dense_oracle(self, rng):
        s = random_sample(rng, g=3, n_range=(3, 9))
        b, cov = gls_beta(s, 1.0, 2.0)
        b_d, cov_d = dense_gls(s, 1.0, 2.0)
        np.testing.assert_allclose(b, b_d, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(cov, cov_d, rtol=1e-10, atol=1e-12)

    def test_balanced_intercept_is_mean_of_means(self, rng):
        s = balanced_oneway(rng, 5, 4, 2.0, 1.0)
        b, _ = gls_beta(s, 2.0, 1.0)
        assert b[0] == pytest.approx(np.mean([a.ybar for a in s.areas]), rel=1e-13)

    def test_collinear_columns_are_named(self, rng):
        s = random_sample(rng, g=5, p_w=1)
        areas = tuple(AreaSample(a.area_id, a.N, a.u, np.hstack([a.x_w, 2 * a.x_w]), a.y) for a in s.areas)
        bad = SampleData(areas, ("b1",), ("w", "w_twice"))
        with pytest.raises(RankDeficiencyError) as ei:
            gls_beta(bad, 1.0, 1.0)
        assert ei.value.columns == ["w_twice"]


class TestReml:
    @pytest.mark.parametrize("seed", range(10))
    def test_anova_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s = balanced_oneway(rng, int(rng.integers(3, 12)), int(rng.integers(2, 8)), 2.0, 3.0)
        f = fit_reml(s)
        s2a, s2e = anova_reml(s)
        assert f.params.sigma2_e == pytest.approx(s2e, rel=1e-8)
        assert f.params.sigma2_alpha == pytest.approx(s2a, rel=1e-8, abs=1e-10)
        assert f.boundary_alpha == (s2a == 0.0)

    def test_small_balanced_example(self):
        y = [[1.0, 2.0], [4.0, 3.5], [0.5, 1.5]]
        s = SampleData(tuple(AreaSample(f"a{i}", 6, [1.0], np.zeros((2, 0)), v) for i, v in enumerate(y)))
        f = fit_reml(s)
        msw = np.mean([np.var(v, ddof=1) for v in y])
        means = np.mean(y, axis=1)
        msb = 2 * np.var(means, ddof=1)
        assert f.params.sigma2_e == pytest.approx(msw, rel=1e-10)
        assert f.params.sigma2_alpha == pytest.approx(max(0.0, (msb - msw) / 2), rel=1e-10)

    def test_zero_effect_hits_boundary(self):
        # identical area means: the between mean square is zero
        base = np.array([1.0, 3.0, 2.0, 6.0])
        s = SampleData(tuple(AreaSample(f"a{i}", 10, [1.0], np.zeros((4, 0)), base[np.roll(np.arange(4), i)])
                             for i in range(4)))
        f = fit_reml(s)
        assert f.boundary_alpha and f.params.sigma2_alpha == 0.0

    @pytest.mark.parametrize("reml", [True, False])
    def test_matches_dense_two_parameter_optimum(self, rng, reml):
        s = random_sample(rng, g=6, n_range=(3, 8), s2a=9.0, s2e=4.0)
        f = fit_reml(s) if reml else fit_ml(s)
        res = optimize.minimize(
            lambda t: -dense_loglik(s, np.exp(t[0]), np.exp(t[1]), reml),
            x0=[0.0, 0.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 5000},
        )
        s2a, s2e = np.exp(res.x)
        assert f.params.sigma2_alpha == pytest.approx(s2a, rel=1e-5)
        assert f.params.sigma2_e == pytest.approx(s2e, rel=1e-5)
        assert f.loglik == pytest.approx(dense_loglik(s, s2a, s2e, reml), rel=1e-9)

    def test_profile_differences_match_dense(self, rng):
        s = random_sample(rng, g=5, n_range=(3, 7))
        prof = profile_objective(s, "REML")

        def dense_profile(psi):
            # sigma2_e profiled out in closed form at fixed ratio
            X, V, Y = dense_blocks(s, psi, 1.0)
            b, covb = dense_gls(s, psi, 1.0)
            q = sum((y - x @ b) @ np.linalg.solve(v, y - x @ b) for x, v, y in zip(X, V, Y))
            dof = s.n - s.p
            ld = sum(np.linalg.slogdet(v)[1] for v in V) + np.linalg.slogdet(np.linalg.inv(covb))[1]
            return -0.5 * (dof * np.log(q / dof) + ld)

        for a, b in [(0.0, 1.0), (0.3, 5.0), (2.0, 0.01)]:
            assert prof(a) - prof(b) == pytest.approx(dense_profile(a) - dense_profile(b), rel=1e-9, abs=1e-9)

    def test_grid_never_beats_optimum(self, rng):
        for _ in range(10):
            s = random_sample(rng, n_range=(2, 12))
            f = fit_reml(s)
            prof = profile_objective(s, "REML")
            best = prof(f.psi)
            grid = np.linspace(0.0, 10 * f.psi + 1, 21)
            assert max(prof(t) for t in grid) <= best + 1e-8

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), c=st.floats(-1e3, 1e3))
    def test_shift_moves_only_the_intercept(self, seed, c):
        s = random_sample(np.random.default_rng(seed), g=8, n_range=(3, 15))
        f0, f1 = fit_reml(s), fit_reml(s.shifted(c))
        assert f1.params.xi[0] - f0.params.xi[0] == pytest.approx(c, abs=1e-8 * max(1.0, abs(c)))
        np.testing.assert_allclose(f1.params.beta[1:], f0.params.beta[1:], atol=1e-8)
        assert f1.params.sigma2_alpha == pytest.approx(f0.params.sigma2_alpha, rel=1e-8, abs=1e-8)
        assert f1.params.sigma2_e == pytest.approx(f0.params.sigma2_e, rel=1e-8)

    def test_constant_response_is_boundary(self):
        s = SampleData(tuple(AreaSample(f"a{i}", 5, [1.0], np.zeros((3, 0)), np.full(3, 7.0)) for i in range(3)))
        f = fit_reml(s)
        assert f.boundary_alpha and f.params.sigma2_alpha == 0.0
        assert f.params.sigma2_e == pytest.approx(0.0, abs=1e-20)
        assert f.params.xi[0] == pytest.approx(7.0)

    def test_preconditions(self, rng):
        one = SampleData((AreaSample("a", 5, [1.0], np.zeros((3, 0)), [1.0, 2.0, 4.0]),))
        with pytest.raises(ValueError):
            fit_reml(one)
        tiny = SampleData(tuple(AreaSample(f"a{i}", 5, [1.0], np.zeros((1, 0)), [float(i)]) for i in range(2)))
        with pytest.raises(ValueError):
            fit_reml(SampleData(tiny.areas[:1] + tiny.areas[:1]) if False else
                     SampleData(tuple(AreaSample(a.area_id, 5, [1.0, i], np.zeros((1, 0)), a.y)
                                      for i, a in enumerate(tiny.areas))))

    def test_method_selection(self, rng):
        s = random_sample(rng, g=5)
        assert fit(s, "ml").method is Method.ML
        assert fit(s, Method.REML).method is Method.REML
        with pytest.raises(ValueError):
            fit(s, Method.FIXED_EFFECTS)

    def test_convergence_error_carries_best(self):
        e = ConvergenceError("x", best=1.5)
        assert e.best == 1.5


class TestMlRemlAgreement:
    def test_within_five_standard_errors(self):
        rng = np.random.default_rng(7)
        ok = 0
        R = 100
        for _ in range(R):
            s = random_sample(rng, g=50, n_range=(40, 60), s2a=4.0, s2e=25.0)
            fm, fr = fit_ml(s), fit_reml(s)
            cov = asymptotic_covariance(fr, s)
            se = cov.standard_errors
            om_ml = np.concatenate([fm.params.xi, [fm.params.sigma2_alpha], fm.params.beta2, [fm.params.sigma2_e]])
            om_re = np.concatenate([fr.params.xi, [fr.params.sigma2_alpha], fr.params.beta2, [fr.params.sigma2_e]])
            ok += bool(np.all(np.abs(om_ml - om_re) < 5 * se))
        assert ok >= 0.99 * R


class TestAsymptoticCovariance:
    def test_normal_theory_entries(self, rng):
        s = random_sample(rng, g=10)
        f = fit_reml(s)
        c = asymptotic_covariance(f, s, MomentSource.NORMAL_THEORY)
        s2a, s2e = f.params.sigma2_alpha, f.params.sigma2_e
        assert c.C[c.alpha_index, c.alpha_index] == pytest.approx(2 * s2a**2)
        assert c.C[0, c.alpha_index] == 0.0
        assert c.var_sigma2_alpha == pytest.approx(2 * s2a**2 / s.g)
        assert c.var_sigma2_e == pytest.approx(2 * s2e**2 / s.n)
        assert c.cov_sigma2 == 0.0
        np.testing.assert_array_equal(c.C, c.C.T)
        assert c.labels[c.alpha_index] == "sigma2_alpha" and c.labels[-1] == "sigma2_e"

    def test_intercept_only_design(self, rng):
        s = balanced_oneway(rng, 6, 5, 3.0, 2.0)
        f = fit_reml(s)
        c = asymptotic_covariance(f, s)
        assert c.B_u.shape == (1, 1) and c.B_u[0, 0] == 1.0
        assert c.C[0, 0] == pytest.approx(f.params.sigma2_alpha)

    def test_within_block(self, rng):
        s = random_sample(rng, g=8, p_w=2)
        f = fit_reml(s)
        c = asymptotic_covariance(f, s)
        B3 = sum((a.x_w - a.xbar_w_pop).T @ (a.x_w - a.xbar_w_pop) for a in s.areas) / s.n
        blk = c.C[c.alpha_index + 1 : c.e_index, c.alpha_index + 1 : c.e_index]
        np.testing.assert_allclose(blk, f.params.sigma2_e * np.linalg.inv(B3), rtol=1e-12)
        assert np.all(np.linalg.eigvalsh(blk) > 0)

    def test_residual_moments(self, rng):
        s = random_sample(rng, g=12)
        f = fit_reml(s)
        c = asymptotic_covariance(f, s, "RESIDUAL_MOMENTS")
        assert c.source is MomentSource.RESIDUAL_MOMENTS
        assert c.moment_plugins["E_e4"] > 0
        assert c.C[0, c.alpha_index] == pytest.approx(c.moment_plugins["E_alpha3"])

    def test_fisher_information_oracle(self, rng):
        s = random_sample(rng, g=7, n_range=(2, 6))
        f = fit_reml(s)
        s2a, s2e = f.params.sigma2_alpha, f.params.sigma2_e
        # half the trace formula with the explicit covariance derivatives
        info = np.zeros((2, 2))
        for a in s.areas:
            V = s2e * np.eye(a.n) + s2a * np.ones((a.n, a.n))
            Vi = np.linalg.inv(V)
            D = [np.ones((a.n, a.n)), np.eye(a.n)]
            for j in range(2):
                for k in range(2):
                    info[j, k] += 0.5 * np.trace(Vi @ D[j] @ Vi @ D[k])
        np.testing.assert_allclose(variance_component_information_inverse(s, s2a, s2e), np.linalg.inv(info),
                                   rtol=1e-10)
        c = asymptotic_covariance(f, s, MomentSource.FISHER_INFORMATION)
        assert c.var_sigma2_alpha == pytest.approx(np.linalg.inv(info)[0, 0], rel=1e-10)

    def test_singular_between_average(self, rng):
        s = random_sample(rng, g=6, p_b=1)
        areas = tuple(AreaSample(a.area_id, a.N, [1.0, 1.0], a.x_w, a.y, a.xbar_w_pop) for a in s.areas)
        s2 = SampleData(areas)
        f = fit_reml(s)
        with pytest.raises(RankDeficiencyError):
            asymptotic_covariance(f, s2)
