"""
Нормы, функционалы столкновений и проверки функциональных неравенств
"""
import numpy as np
import pytest

from modules.checks import coercivity_family
from modules.collision import AngularQuadrature
from modules.errors import FunctionalError, GridError
from modules.functionals import (
    dilate, dilation_sweep, eval_I1, eval_Ip, eval_Ip_upper, eval_Jp, coercivity_fit, hardy_check, hls_check,
    hls_exponent, lemma21_check, lemma21_coefficients, lp_norm, norm_report, report_line,
    sobolev_embedding_check, sobolev_exponent, sobolev_weighted, weighted_l1, weighted_l2,
)
from modules.kernel_grid import ClassUParams, Distribution, make_grid, maxwellian


class TestNorms:

    def test_lp_of_constant(self, grid4):
        f = Distribution(grid4, np.full(grid4.shape, 2.0))
        volume = (2.0 * grid4.radius) ** 3
        assert lp_norm(f, 1) == pytest.approx(2.0 * volume)
        assert lp_norm(f, 2) == pytest.approx(2.0 * volume ** 0.5)
        assert lp_norm(f, 'inf') == 2.0
        assert lp_norm(f, float('inf')) == 2.0

    def test_lp_rejects_small_p(self, maxwell6):
        with pytest.raises(FunctionalError):
            lp_norm(maxwell6, 0.5)

    def test_weighted_l1_zero_weight_is_mass(self, bump6):
        assert weighted_l1(bump6, 0.0) == pytest.approx(bump6.mass(), rel=1e-14)
        assert weighted_l1(bump6, 5.0) > bump6.mass()

    def test_sobolev_parseval(self, bump6):
        """При s = 0 дискретная H^s-норма совпадает с L²"""
        assert sobolev_weighted(bump6, 0.0, -0.5) == pytest.approx(weighted_l2(bump6, -0.5), rel=1e-12)

    def test_sobolev_monotone_in_order(self, bump6):
        assert sobolev_weighted(bump6, 0.3) < sobolev_weighted(bump6, 0.6)

    def test_sobolev_padding(self, bump6):
        with pytest.raises(FunctionalError):
            sobolev_weighted(bump6, 0.5, padding=1)

    def test_norm_report(self, bump6, kernel6):
        report = norm_report(bump6.with_time(0.5), 2.0, kernel6)
        assert report.p == 2.0
        assert report.time_tag == 0.5
        assert report.lp == pytest.approx(lp_norm(bump6, 2.0))
        assert report.linf == pytest.approx(bump6.values.max())
        assert set(report.as_dict()) >= {'lp', 'l1_w', 'l2_gamma_half', 'hs_gamma_half_of_fp2'}


class TestCollisionFunctionals:

    def test_jp_nonnegative(self, bump6, maxwell6, kernel6, angular):
        assert eval_Jp(maxwell6, bump6, 2.0, kernel6, angular).value >= 0.0

    def test_values_carry_metadata(self, bump6, kernel6, angular):
        value = eval_Ip(bump6, bump6, 1.5, kernel6, angular)
        assert value.kind == 'I_p' and value.p == 1.5 and value.method == 'direct'
        assert value.quadrature_error_estimate == 0.0
        assert eval_I1(bump6, bump6, 1.5, kernel6, angular).kind == 'I_1'

    def test_upper_functional(self, bump6, kernel6):
        value = eval_Ip_upper(bump6, bump6, 2.0, kernel6)
        assert value.value > 0.0

    def test_rejects_p_at_most_one(self, bump6, kernel6, angular):
        with pytest.raises(FunctionalError):
            eval_Ip(bump6, bump6, 1.0, kernel6, angular)

    def test_rejects_grid_mismatch(self, bump6, kernel6, angular):
        with pytest.raises(GridError):
            eval_Jp(maxwellian(make_grid(6, 3.0)), bump6, 2.0, kernel6, angular)

    def test_monte_carlo_agrees_with_quadrature(self, bump6, maxwell6, kernel6):
        """Стратифицированный Монте-Карло против тонкой угловой квадратуры"""
        fine = AngularQuadrature(32, 16)
        direct = eval_Jp(maxwell6, bump6, 2.0, kernel6, fine).value
        mc = eval_Jp(maxwell6, bump6, 2.0, kernel6, fine, method='mc', n_samples=40_000, seed=1)
        assert mc.method == 'mc' and mc.quadrature_error_estimate > 0.0
        assert abs(mc.value - direct) <= 5.0 * mc.quadrature_error_estimate + 0.1 * abs(direct)

    def test_monte_carlo_sample_floor(self, bump6, kernel6, angular):
        with pytest.raises(FunctionalError):
            eval_Ip(bump6, bump6, 2.0, kernel6, angular, method='mc', n_samples=10)


class TestLemma21:

    def test_coefficients(self):
        assert lemma21_coefficients(2.0) == pytest.approx((0.5, 0.5))
        assert lemma21_coefficients(3.0) == pytest.approx((2.0 / 3.0, 1.0 / 3.0))

    def test_equilibrium(self, maxwell6, kernel6, angular):
        report = lemma21_check(maxwell6, maxwell6, 2.0, kernel6, angular)
        assert report['pass']
        assert report['check_name'] == 'lemma21'

    @pytest.mark.parametrize('p', [1.5, 2.0, 3.0])
    def test_random_pair(self, bump6, maxwell6, kernel6, angular, p):
        report = lemma21_check(maxwell6, bump6, p, kernel6, angular, class_u=ClassUParams(0.5, 50.0))
        assert report['pass'], f"p={p}: lhs={report['lhs']:.4e} rhs={report['rhs']:.4e}"

    def test_rejects_g_outside_class(self, bump6, maxwell6, kernel6, angular):
        with pytest.raises(FunctionalError):
            lemma21_check(maxwell6, bump6, 2.0, kernel6, angular, class_u=ClassUParams(5.0, 50.0))

    def test_q_direct_diagnostic(self, bump6, maxwell6, kernel6, angular):
        report = lemma21_check(maxwell6, bump6, 2.0, kernel6, angular, with_q_direct=True)
        assert np.isfinite(report['lhs_q_direct'])


class TestCoercivity:

    def test_positive_constant(self, grid6, kernel6, angular):
        fit = coercivity_fit(coercivity_family(grid6, 10), 2.0, kernel6, angular)
        c0, c1 = fit
        assert fit.success and c0 > 0.0 and c1 >= 0.0
        assert fit.n_samples == 10

    def test_empty_family(self, kernel6, angular):
        with pytest.raises(FunctionalError):
            coercivity_fit([], 2.0, kernel6, angular)


class TestInequalities:

    def test_exponents(self):
        assert hls_exponent(1.0, 1.5) == pytest.approx(3.0)
        assert sobolev_exponent(2.0, 0.5) == pytest.approx(3.0)
        with pytest.raises(FunctionalError):
            hls_exponent(2.0, 1.5)
        with pytest.raises(FunctionalError):
            sobolev_exponent(2.0, 1.0)

    def test_hls_rejects_wrong_target(self, maxwell6):
        with pytest.raises(FunctionalError):
            hls_check(maxwell6, 1.0, 1.5, q_out=2.0)

    def test_hardy_ratio(self, maxwell6):
        report = hardy_check(maxwell6, 0.5)
        assert report['pass'] and 0.0 < report['ratio'] < np.inf

    def test_hardy_zero_is_degenerate(self, grid6):
        report = hardy_check(Distribution(grid6, grid6.zeros()), 0.5)
        assert report['degenerate'] and report['pass']

    def test_hardy_range(self, maxwell6):
        with pytest.raises(FunctionalError):
            hardy_check(maxwell6, 1.5)

    def test_embedding_ratio(self, maxwell6):
        report = sobolev_embedding_check(maxwell6, 2.0, 0.5, -1.0)
        assert report['pass'] and report['p_s'] == pytest.approx(3.0)

    def test_dilation_sweep(self, maxwell6):
        sweep = dilation_sweep(hls_check, maxwell6, alpha=1.0, p_in=1.5)
        assert set(sweep['ratios']) == {0.5, 1.0, 2.0}
        assert sweep['spread'] >= 1.0

    def test_dilate_identity(self, maxwell6):
        assert np.allclose(dilate(maxwell6, 1.0).values, maxwell6.values)


class TestReportLine:

    def test_standard_keys_first(self):
        line = report_line({'extra': 2, 'pass': True, 'lhs': 1.5, 'check_name': 'x'})
        assert line == 'check_name=x lhs=1.5 pass=true extra=2'
