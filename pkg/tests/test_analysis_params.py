"""
Системы ограничений на показатели: точная арифметика и разрешимость
"""
import math
from fractions import Fraction

import pytest

from modules.analysis_params import (
    SYSTEM_IDS, admissible_range, check_landau_consistency, collect_alphas, compose_alpha6,
    derive_degiorgi_exponents, solve, solve_lemma26, solve_theta1011, solve_theta3, solve_theta4, solve_theta5,
    solve_theta67_r, solve_theta89_lq,
)
from modules.errors import InfeasibleSystemError, KernelParamsError
from modules.kernel_grid import MODERATELY_SOFT, VERY_SOFT

HALF = Fraction(1, 2)


class TestWorkedValues:
    """p = 2, s = 1/2"""

    def test_theta3_exact(self):
        solution = solve_theta3(2, HALF)
        assert solution['theta3'] == Fraction(3, 4)
        assert solution['alpha1'] == 3
        assert solution['p_s'] == 3
        assert solution.feasible

    def test_theta67(self):
        solution = solve_theta67_r(2, HALF)
        assert solution['theta7'] == Fraction(2, 3)
        assert solution['theta6'] == Fraction(1, 100)
        assert float(solution['r']) == pytest.approx(7.0 / 3.0 - 0.02, abs=1e-12)
        assert float(solution['r']) == pytest.approx(2.3133, abs=5e-5)
        assert 2 < solution['r'] < 3
        assert solution.feasible

    def test_theta89(self):
        sol67 = solve_theta67_r(2, HALF)
        solution = solve_theta89_lq(2, HALF, q=Fraction(105, 100), sol67=sol67)
        assert float(solution['ell']) == pytest.approx(2.3133 / 1.05, abs=1e-4)
        assert solution['ell'] > 2
        assert solution.feasible

    def test_theta1011(self):
        solution = solve_theta1011(HALF)
        assert solution['theta11'] == Fraction(1, 3)
        assert solution['theta10'] == Fraction(1, 100)
        assert float(solution['alpha']) == pytest.approx(0.01 + 2.0 / 3.0 + 3.0 * (1 - 0.01 - 1.0 / 3.0) - 1.0)
        assert solution.feasible

    def test_alpha3(self):
        sol67 = solve_theta67_r(2, HALF)
        sol89 = solve_theta89_lq(2, HALF, sol67=sol67)
        result = derive_degiorgi_exponents(2, HALF, sol67, sol89, W0=1.0)
        expected = 2.0 / 3.0 + 1.5 * (1.0 - 0.01 - 2.0 / 3.0)
        assert result['alpha3'] == pytest.approx(expected, abs=1e-12)
        assert result['alpha3'] == pytest.approx(1.1517, abs=5e-5)
        assert result['alpha4'] > 1 and result['b'] > 0
        assert result['K_threshold'] > 0

    def test_float_inputs_match_exact(self):
        exact = solve_theta3(2, HALF)
        approx = solve_theta3(2.0, 0.5)
        assert isinstance(approx['theta3'], float)
        assert approx['theta3'] == pytest.approx(float(exact['theta3']), abs=1e-15)


class TestAdmissibleRange:

    def test_example(self):
        window = admissible_range(-2.0, 0.9)
        assert window.p_lower == pytest.approx(3.0 / 2.8)
        assert window.p_upper_lemma == pytest.approx(3.0)
        assert window.regime == VERY_SOFT

    def test_regime_moderately_soft(self):
        assert admissible_range(-0.5, 0.5).regime == MODERATELY_SOFT

    def test_contains_is_open(self):
        window = admissible_range(-1, HALF)
        assert window.contains(Fraction(5, 4))
        assert not window.contains(Fraction(3, 2))
        assert not window.contains(1)

    def test_gamma_out_of_range(self):
        with pytest.raises(KernelParamsError):
            admissible_range(0.5, 0.5)


class TestSystems:

    def test_theta3_degenerate(self):
        with pytest.raises(InfeasibleSystemError):
            solve_theta3(1, HALF)

    def test_lemma26_ii_inside_window(self):
        solution = solve_lemma26(Fraction(5, 4), -1, HALF, 'ii')
        assert solution.feasible, solution.violated
        assert 0 < solution['theta1'] < 1

    def test_lemma26_ii_outside_window(self):
        solution = solve_lemma26(4, -1, HALF, 'ii')
        assert not solution.feasible
        assert 'p_below_upper' in solution.violated
        with pytest.raises(InfeasibleSystemError):
            solution.require()

    def test_lemma26_iii_requires_p0(self):
        with pytest.raises(InfeasibleSystemError):
            solve_lemma26(2, -1, HALF, 'iii')

    def test_theta4_and_theta5(self):
        assert solve_theta4(Fraction(5, 4), -1, HALF)['theta4'] > 0
        solution = solve_theta5(3, Fraction(5, 4), -1, HALF)
        assert 'theta5' in solution.values

    def test_margins_exact_for_rationals(self):
        solution = solve_theta67_r(Fraction(5, 2), Fraction(1, 3))
        assert all(isinstance(m, Fraction) for m in solution.margins.values())

    @pytest.mark.parametrize('s', [0.1, 0.3, 0.5, 0.7, 0.9])
    @pytest.mark.parametrize('p', [1.2, 2.0, 4.0, 10.0])
    def test_default_choices_feasible(self, p, s):
        for solution in (solve_theta3(p, s), solve_theta67_r(p, s), solve_theta89_lq(p, s), solve_theta1011(s)):
            assert solution.feasible, f"{solution.system_id} при p={p}, s={s}: {solution.violated}"

    def test_collect_alphas(self):
        solution = collect_alphas(2, HALF, gamma=-1, alpha5=0.5)
        assert solution['alpha1'] == 3
        assert solution['alpha6'] == pytest.approx(compose_alpha6(0.5, solution['alpha3'], solution['alpha4']))
        assert solution['regime'] in (MODERATELY_SOFT, VERY_SOFT)

    def test_as_lines(self):
        lines = solve_theta3(2, HALF).as_lines()
        assert lines[0] == 'system_id=theta3'
        assert 'theta3=3/4 (0.75)' in lines


class TestDispatcher:

    def test_known_ids(self):
        assert solve('theta3', p=2, s=HALF)['theta3'] == Fraction(3, 4)
        assert solve('K_threshold', p=2, s=HALF)['K_threshold'] > 0
        assert set(SYSTEM_IDS) >= {'theta3', 'theta67r', 'theta89lq', 'theta1011', 'alphas'}

    def test_unknown_id(self):
        with pytest.raises(InfeasibleSystemError):
            solve('theta99', p=2, s=HALF)

    def test_missing_parameter(self):
        with pytest.raises(InfeasibleSystemError):
            solve('lemma26ii', p=2, s=HALF)


class TestLandauLimit:

    def test_limit(self):
        report = check_landau_consistency(-2.9, 0.95)
        assert report['pass']
        assert math.isclose(report['landau_limit'], 1.5, abs_tol=1e-5)
