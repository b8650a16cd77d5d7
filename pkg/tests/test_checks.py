"""
Именованные проверки на малых выборках
"""
import numpy as np
import pytest

from modules.checks import CHECKS, WORKED_VALUES, random_density, run_check
from modules.errors import ConfigError
from modules.kernel_grid import make_grid


class TestRunCheck:

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            run_check('no_such_check')

    def test_registry(self):
        assert {'equilibrium', 'lemma21', 'decay', 'exponents', 'degiorgi_soundness', 'ode'} <= set(CHECKS)

    def test_random_density_positive(self):
        f = random_density(make_grid(6, 4.0), np.random.default_rng(3))
        assert np.all(f.values > 0.0)


class TestScalarChecks:

    def test_inhomog(self):
        report = run_check('inhomog', draws=2000, seed=1)
        assert report['pass'] and report['lhs'] == 0

    def test_decay_never_violated_at_threshold(self):
        report = run_check('decay', draws=100, seed=2)
        assert report['lhs'] == 0
        assert report['control_rate'] > 0.0

    def test_exponents(self):
        report = run_check('exponents')
        assert report['pass'], report['failures']
        assert report['worked_values']['theta3'] == WORKED_VALUES['theta3']
        assert report['worked_values_ok']

    def test_landau(self):
        assert run_check('landau')['pass']

    def test_ode(self):
        report = run_check('ode', draws=5, seed=4)
        assert report['pass'], report['failures']


class TestGridChecks:

    def test_weak_form_triangle(self):
        report = run_check('weak_form_triangle', n=6, radius=4.0, draws=2, eps_theta=0.2, n_theta=4, n_phi=4)
        assert report['pass'], f"Расхождение {report['lhs']:.3e}"

    def test_degiorgi_soundness(self):
        report = run_check('degiorgi_soundness')
        assert report['pass'], f"K*={report['K_star']:.8g}, sup M={report['lhs']:.8g}"
