import math

import numpy as np
import pytest
from scipy.integrate import quad

import shflab.diagram_evaluator as de
from shflab.combinatorics import c_coeff_closed, enumerate_pair_sequences
from shflab.diagram_evaluator import (
    BoundReport,
    CovarianceQuery,
    DiagramSpec,
    covariance_kernel,
    diagram_integral_direct,
    diagram_integral_multiplier,
    renewal_mass_constant,
    second_moment_exact,
    truncation_radius,
    upper_bound_series,
)
from shflab.errors import ConfigurationError, DomainError, NumericalError
from shflab.multiplier_kernels import MultiplierConfig, big_F, default_c0
from shflab.special_functions import (
    EULER_GAMMA,
    DickmanParameter,
    heat_kernel,
    renewal_interpolant,
)


def mcfg(lam, theta=0.0, **kw):
    return MultiplierConfig(lam=lam, params=DickmanParameter(theta=theta), **kw)


class TestDirectIntegral:
    def test_m0_is_one(self):
        res = diagram_integral_direct(DiagramSpec(4, 0, 0.1))
        assert res.value == 1.0 and res.error_estimate == 0.0

    def test_h2_terminates_beyond_m1(self):
        for m in range(2, 7):
            res = diagram_integral_direct(DiagramSpec(2, m, 0.05))
            assert res.value == 0.0

    def test_m1_log_growth(self):
        # I_1 = (h choose 2) * int (1/a) int G over the shrunk simplex
        # grows linearly in log(1/eps)
        vals = {}
        for eps in (1e-3, 1e-5):
            vals[eps] = diagram_integral_direct(DiagramSpec(2, 1, eps)).value
        slope = (vals[1e-5] - vals[1e-3]) / (math.log(1e5) - math.log(1e3))
        ratio1 = vals[1e-3] / math.log(1e3)
        assert slope == pytest.approx(ratio1, rel=0.05)

    def test_m1_prefactor_scaling(self):
        a = diagram_integral_direct(DiagramSpec(2, 1, 1e-3)).value
        b = diagram_integral_direct(DiagramSpec(4, 1, 1e-3)).value
        assert b == pytest.approx(6.0 * a, rel=1e-12)

    def test_pinned_sequence_prefactor(self):
        seq = enumerate_pair_sequences(3, 2)[0]
        pinned = diagram_integral_direct(
            DiagramSpec(3, 2, 0.05, seq=seq), "nested_quadrature")
        free = diagram_integral_direct(DiagramSpec(3, 2, 0.05), "nested_quadrature")
        assert free.value == pytest.approx(6.0 * pinned.value, rel=1e-9)

    def test_nested_vs_monte_carlo_m2(self):
        spec = DiagramSpec(3, 2, 0.05)
        nest = diagram_integral_direct(spec, "nested_quadrature")
        mc = diagram_integral_direct(spec, "monte_carlo", budget=4_000_000, seed=5)
        combined = math.hypot(nest.error_estimate, mc.error_estimate)
        assert abs(nest.value - mc.value) <= 3.0 * combined

    def test_monte_carlo_budget_floor(self):
        with pytest.raises(DomainError):
            diagram_integral_direct(DiagramSpec(3, 2, 0.05), "monte_carlo",
                                    budget=100)

    def test_nested_depth_cap(self):
        with pytest.raises(DomainError):
            diagram_integral_direct(DiagramSpec(3, 4, 0.05), "nested_quadrature")

    def test_unknown_method(self):
        with pytest.raises(DomainError):
            diagram_integral_direct(DiagramSpec(3, 2, 0.05), "simpson")

    def test_target_flagging(self):
        res = diagram_integral_direct(DiagramSpec(3, 2, 0.1), "monte_carlo",
                                      budget=20_000, seed=1, target_rel=1e-6)
        assert not res.converged
        res2 = diagram_integral_direct(DiagramSpec(3, 2, 0.1), "monte_carlo",
                                       budget=20_000, seed=1, target_rel=0.5)
        assert res2.converged

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            DiagramSpec(1, 0, 0.1)
        with pytest.raises(ConfigurationError):
            DiagramSpec(3, 2, 1.5)
        seq = enumerate_pair_sequences(3, 2)[0]
        with pytest.raises(ConfigurationError):
            DiagramSpec(3, 3, 0.1, seq=seq)


class TestMultiplierIntegral:
    def test_reduction_vs_direct_2d(self):
        cfg = mcfg(math.exp(2.0))
        red = diagram_integral_multiplier(DiagramSpec(3, 2, 0.05), cfg)

        def inner(u1):
            v, _ = quad(lambda u2: big_F(u2 + 0.5 * u1, cfg), 0.0, 2.0 - u1,
                        limit=100)
            return v

        v2d, _ = quad(lambda y: inner(math.exp(-y)), -math.log(2.0),
                      math.log(1.0 / 0.05 ** 2), limit=100)
        assert red == pytest.approx(6.0 * v2d, rel=1e-4)

    def test_h2_prefactor_zero(self):
        assert diagram_integral_multiplier(DiagramSpec(2, 2, 0.05), mcfg(3.0)) == 0.0

    def test_m_floor(self):
        with pytest.raises(DomainError):
            diagram_integral_multiplier(DiagramSpec(3, 1, 0.05), mcfg(3.0))

    def test_lambda_hypothesis(self):
        with pytest.raises(DomainError):
            diagram_integral_multiplier(DiagramSpec(3, 2, 0.05), mcfg(0.5))

    @pytest.mark.parametrize("eps", [0.1, 0.05])
    def test_chain_inequality(self, eps):
        # sum_m I_m <= C_G e^{2 lam} sum_m I^lam_m for m <= 3, with the
        # renewal-mass constant made explicit and both sides numerical
        lam, theta, h = 3.0, 0.0, 3
        cfg = mcfg(lam, theta)
        direct = [
            diagram_integral_direct(DiagramSpec(h, 0, eps)).value,
            diagram_integral_direct(DiagramSpec(h, 1, eps), theta=theta).value,
            diagram_integral_direct(DiagramSpec(h, 2, eps), "monte_carlo",
                                    budget=400_000, theta=theta, seed=2).value,
            diagram_integral_direct(DiagramSpec(h, 3, eps), "monte_carlo",
                                    budget=400_000, theta=theta, seed=3).value,
        ]
        decoupled = [
            direct[0],
            direct[1],
            diagram_integral_multiplier(DiagramSpec(h, 2, eps), cfg),
            diagram_integral_multiplier(DiagramSpec(h, 3, eps), cfg),
        ]
        c_g = renewal_mass_constant(theta)
        lhs = sum(direct)
        rhs = max(c_g, 1.0) * math.exp(2.0 * lam) * sum(decoupled)
        assert lhs <= rhs


class TestSecondMoment:
    def test_linear_log_growth(self):
        r6 = second_moment_exact(0.0, 1e-6) / math.log(1e6)
        r8 = second_moment_exact(0.0, 1e-8) / math.log(1e8)
        assert abs(r6 - r8) / r8 < 0.05

    def test_matches_m1_diagram_route(self):
        for theta in (-1.0, 0.0, 1.0):
            for eps in (1e-3, 1e-7):
                i1 = diagram_integral_direct(DiagramSpec(2, 1, eps), theta=theta)
                sm = second_moment_exact(theta, eps)
                assert sm == pytest.approx(1.0 + i1.value, rel=1e-8)

    def test_shrinking_domain(self):
        near_one = second_moment_exact(0.0, 0.9)
        assert 1.0 < near_one < 2.0
        assert near_one < second_moment_exact(0.0, 0.5) < second_moment_exact(0.0, 0.1)

    def test_domain(self):
        with pytest.raises(DomainError):
            second_moment_exact(0.0, 1.5)


class TestCovarianceKernel:
    QUERIES = [
        CovarianceQuery(0.0, 1.0, (0.1, 0.0), (0.3, 0.2), (-0.2, 0.1), (0.4, -0.3)),
        CovarianceQuery(0.5, 0.8, (0.0, 0.2), (-0.3, 0.1), (0.2, 0.2), (-0.1, 0.5)),
        CovarianceQuery(-1.0, 1.5, (0.4, -0.2), (0.1, 0.3), (0.0, 0.0), (0.5, 0.1)),
    ]

    def test_swap_symmetry_and_positivity(self):
        for q in self.QUERIES:
            k = covariance_kernel(q)
            swapped = CovarianceQuery(q.theta, q.t, q.x2, q.x, q.y2, q.y)
            assert k > 0.0
            assert covariance_kernel(swapped) == pytest.approx(k, rel=1e-9)

    def test_against_monte_carlo_oracle(self):
        q = self.QUERIES[0]
        k = covariance_kernel(q)
        table = renewal_interpolant(q.theta)
        dx = (q.x2[0] - q.x[0], q.x2[1] - q.x[1])
        dy = (q.y2[0] - q.y[0], q.y2[1] - q.y[1])
        rng = np.random.default_rng(np.random.Philox(key=99))
        n = 2_000_000
        a = q.t * rng.random(n)
        sing = rng.random(n) < 0.7
        y = rng.random(n)
        x = 1.0 / np.maximum(y, 1e-300)
        v = np.where(sing, np.exp(-np.minimum(x, 745.0)),
                     1.0 / math.e + (2.0 - 1.0 / math.e) * rng.random(n))
        ratio = np.where(
            sing, table.rescaled(np.maximum(x, 1.0)) / 0.7,
            np.where(v <= 2.0, table(np.clip(v, 1e-300, 2.0)), 0.0)
            * (2.0 - 1.0 / math.e) / 0.3)
        rem = q.t - a - v
        ok = rem > 0.0
        g1 = np.exp(-(dx[0] ** 2 + dx[1] ** 2) / (2.0 * a)) / (2.0 * math.pi * a)
        g2 = np.where(ok,
                      np.exp(-(dy[0] ** 2 + dy[1] ** 2)
                             / (2.0 * np.maximum(rem, 1e-300)))
                      / (2.0 * math.pi * np.maximum(rem, 1e-300)), 0.0)
        w = np.where(ok, g1 * ratio * g2 * q.t, 0.0)
        est = float(w.mean())
        stderr = float(w.std() / math.sqrt(n))
        mid = (0.5 * (q.y[0] + q.y2[0] - q.x[0] - q.x2[0]),
               0.5 * (q.y[1] + q.y2[1] - q.x[1] - q.x2[1]))
        oracle = math.pi * heat_kernel(q.t / 4.0, mid) * est
        tol = max(3.0 * math.pi * heat_kernel(q.t / 4.0, mid) * stderr, 1e-3 * k)
        assert abs(k - oracle) <= tol

    def test_coincident_points_diverge(self):
        q = CovarianceQuery(0.0, 1.0, (0.1, 0.1), (0.1, 0.1), (0.2, 0.0), (0.2, 0.0))
        with pytest.raises(NumericalError):
            covariance_kernel(q)

    def test_working_range(self):
        with pytest.raises(DomainError):
            covariance_kernel(CovarianceQuery(0.0, 3.0, (0, 0), (1, 0), (0, 1), (1, 1)))


class TestTruncationRadius:
    def test_reference_values(self):
        assert truncation_radius(0.5, 2) == pytest.approx(2.2293078072747156, rel=1e-12)
        assert truncation_radius(1.0 - 1e-12, 2) == pytest.approx(
            1.8930184728248454, rel=1e-9)

    def test_monotone_in_rho(self):
        rs = [truncation_radius(r, 3) for r in (0.1, 0.3, 0.5, 0.9)]
        assert all(a > b for a, b in zip(rs, rs[1:]))

    def test_domain(self):
        with pytest.raises(DomainError):
            truncation_radius(0.0, 2)
        with pytest.raises(DomainError):
            truncation_radius(0.5, 1)

    def test_gaussian_domination_outside_ball(self):
        # g_{eps^2/2}(x) <= 2 e^{-R^2/2} g_{eps^2}(x) for |x| > R eps
        rng = np.random.default_rng(3)
        eps = 0.01
        for rho in (0.2, 0.7):
            R = truncation_radius(rho, 2) + 1e-9
            for _ in range(1000):
                r = R * eps * (1.0 + 2.0 * rng.random())
                phi = 2.0 * math.pi * rng.random()
                x = (r * math.cos(phi), r * math.sin(phi))
                lhs = heat_kernel(eps ** 2 / 2.0, x)
                rhs = 2.0 * math.exp(-R * R / 2.0) * heat_kernel(eps ** 2, x)
                assert lhs <= rhs * (1.0 + 1e-12)

    def test_uniform_density_bounds(self):
        # 1/(pi eps^2) on the ball is <= e g_{eps^2/2}, and the R-ball
        # uniform is >= R^{-2} g_{eps^2/2} on its support (R > 1)
        rng = np.random.default_rng(4)
        eps, R = 0.05, 2.5
        for _ in range(1000):
            r = eps * math.sqrt(rng.random())
            phi = 2.0 * math.pi * rng.random()
            x = (r * math.cos(phi), r * math.sin(phi))
            uniform = 1.0 / (math.pi * eps ** 2)
            assert uniform <= math.e * heat_kernel(eps ** 2 / 2.0, x) * (1 + 1e-12)
            xR = (R * x[0], R * x[1])
            uniform_R = 1.0 / (math.pi * R ** 2 * eps ** 2)
            assert uniform_R >= heat_kernel(eps ** 2 / 2.0, xR) / R ** 2 * (1 - 1e-12)


class TestTailFactor:
    @pytest.mark.parametrize("theta", [-1.0, 0.0, 1.0])
    @pytest.mark.parametrize("eps", [1e-3, 1e-6])
    def test_late_window_mass(self, theta, eps):
        # int over the last eps^2-window of G(b - a) db <= C / log(1/eps)
        table = renewal_interpolant(theta)
        top1, top2 = 1.0 + eps ** 2, 1.0 + 2.0 * eps ** 2
        for a in np.linspace(eps ** 2, top2 - 1e-12, 37):
            hi = table.integral(min(top2 - a, 2.0))
            lo = table.integral(max(top1 - a, 0.0))
            assert (hi - lo) * math.log(1.0 / eps) <= 5.0


class TestUpperBoundSeries:
    def test_h2_structure(self):
        # for h = 2 only m <= 1 survive: head = e^{2 lam} L (1 + f + 4/log lam)
        eps = 1e-8
        rep = upper_bound_series(2, eps, mcfg(3.0))
        lam = rep.cutoff.lambda_eps
        expected = (2.0 * lam + math.log(math.log(1.0 / eps) *
                    (1.0 + rep.f_value + 4.0 / math.log(lam))))
        assert rep.head_log == pytest.approx(expected, rel=1e-12)

    def test_assembly_identity(self):
        rep = upper_bound_series(3, 1e-6, mcfg(3.0))
        if math.isfinite(rep.tail_value) and math.isfinite(rep.head_value):
            assert rep.series_value == pytest.approx(
                rep.head_value + rep.tail_value, rel=1e-12)
        else:
            assert math.isinf(rep.series_value)

    def test_tail_hypothesis_flag(self):
        # at the optimised schedule the completion hypothesis
        # log lam > 8 e^mu h^2 fails for every accessible eps
        rep = upper_bound_series(3, 1e-10, mcfg(3.0))
        assert not rep.lambda_hypothesis_ok
        assert math.isinf(rep.tail_value)

    def test_config_margin_guard(self):
        with pytest.raises(ConfigurationError):
            upper_bound_series(3, 1e-8, mcfg(3.0, c0=10.0))

    def test_head_exponent_trend(self):
        # the finite head exponent decreases along the epsilon ladder and
        # stays far above h-choose-2 at desk scale (the multiplier
        # corrections dominate; see the acceptance notes)
        reps = [upper_bound_series(3, eps, mcfg(3.0))
                for eps in (1e-4, 1e-8, 1e-12, 1e-16)]
        exps = [r.head_exponent for r in reps]
        assert all(a >= b for a, b in zip(exps, exps[1:]))

    def test_stubbed_kernel_collapses_to_diagonal(self, monkeypatch):
        # with f forced to zero only the i = m column survives:
        # head = e^{2 lam} L sum_m pref(m) c^m_m (4/log lam)^m
        monkeypatch.setattr(de, "small_f", lambda *a, **k: 0.0)
        eps, h = 1e-8, 3
        rep = upper_bound_series(h, eps, mcfg(3.0))
        lam = rep.cutoff.lambda_eps
        q = 4.0 / math.log(lam)
        total = sum(
            (1.0 if m == 0 else 3.0 * 2.0 ** (m - 1)) * c_coeff_closed(m, m) * q ** m
            for m in range(int(math.ceil(rep.cutoff.k)))
        )
        expected = 2.0 * lam + math.log(math.log(1.0 / eps)) + math.log(total)
        assert rep.head_log == pytest.approx(expected, rel=1e-9)

    def test_h_floor(self):
        with pytest.raises(DomainError):
            upper_bound_series(1, 1e-8, mcfg(3.0))
