"""
Сетка скоростей, ядро столкновений, максвеллиан и класс U
"""
import math

import numpy as np
import pytest

from modules.errors import GridError, KernelParamsError
from modules.kernel_grid import (
    ClassUParams, Distribution, KernelParams, MODERATELY_SOFT, VERY_SOFT, angular_integral, b_angular,
    check_class_u, from_inverse_power_law, make_grid, maxwellian, phi, phi_is_singular, to_inverse_power_law,
)


class TestVelocityGrid:

    def test_spacing_and_first_node(self):
        grid = make_grid(4, 2.0)
        assert grid.spacing == pytest.approx(1.0)
        assert grid.node_coordinate(0) == pytest.approx(-1.5)

    def test_spacing_sixteen(self):
        assert make_grid(16, 6.0).spacing == pytest.approx(0.75)

    @pytest.mark.parametrize('n, radius', [(3, 1.0), (2, 1.0), (8, 0.0), (8, -1.0)])
    def test_rejects_bad_grid(self, n, radius):
        with pytest.raises(GridError):
            make_grid(n, radius)

    def test_coordinates_are_symmetric(self):
        grid = make_grid(8, 3.0)
        assert np.array_equal(grid.coords, -grid.coords[::-1])

    def test_grid_hash_depends_on_geometry(self):
        assert make_grid(8, 3.0).grid_hash() == make_grid(8, 3.0).grid_hash()
        assert make_grid(8, 3.0).grid_hash() != make_grid(8, 4.0).grid_hash()


class TestKernel:

    def test_phi_values(self):
        assert phi(1.0, KernelParams(-2.3, 0.5)) == pytest.approx(1.0)
        assert phi(2.0, KernelParams(-1.0, 0.5)) == pytest.approx(0.5)
        assert phi(0.0, KernelParams(-1.0, 0.5, delta_rel=0.1)) == pytest.approx(10.0)

    def test_phi_singular_sentinel(self):
        kp = KernelParams(-1.0, 0.5)
        assert math.isinf(phi(0.0, kp))
        assert phi_is_singular(0.0, kp)
        assert not phi_is_singular(0.0, kp.with_delta(0.1))

    def test_phi_monotone_and_mollified_below(self):
        kp = KernelParams(-1.5, 0.5)
        r = np.linspace(0.1, 5.0, 50)
        values = phi(r, kp)
        assert np.all(np.diff(values) < 0.0)
        assert np.all(phi(r, kp.with_delta(0.3)) <= values)

    def test_b_angular_values(self):
        kp = KernelParams(-1.0, 0.5, b0=1.0, eps_theta=0.05)
        assert b_angular(math.cos(math.pi / 2), kp) == pytest.approx((math.pi / 2) ** -2, rel=1e-12)
        assert b_angular(math.cos(3 * math.pi / 4), kp) == 0.0
        assert b_angular(math.cos(0.025), kp) == pytest.approx(b_angular(math.cos(0.05), kp))

    def test_b_angular_rejects_out_of_range(self):
        with pytest.raises(KernelParamsError):
            b_angular(1.5, KernelParams(-1.0, 0.5))

    def test_angular_integral_diverges_at_rate(self):
        """Наклон log ∫b по log eps близок к -2s"""
        s = 0.5
        eps = np.array([0.04, 0.02, 0.01, 0.005])
        values = [angular_integral(KernelParams(-1.0, s, eps_theta=e)) for e in eps]
        slope = np.polyfit(np.log(eps), np.log(values), 1)[0]
        assert abs(slope + 2 * s) <= 0.1 * 2 * s, f"Наклон {slope:.3f} вместо {-2 * s}"

    @pytest.mark.parametrize('bad', [dict(gamma=0.0, s=0.5), dict(gamma=-3.0, s=0.5),
                                     dict(gamma=-1.0, s=1.0), dict(gamma=-1.0, s=0.5, eps_theta=2.0)])
    def test_params_validation(self, bad):
        with pytest.raises(KernelParamsError):
            KernelParams(**bad)

    def test_regime(self):
        assert KernelParams(-0.5, 0.5).regime == MODERATELY_SOFT
        assert KernelParams(-2.0, 0.5).regime == VERY_SOFT


class TestInversePowerLaw:

    def test_known_values(self):
        kp = from_inverse_power_law(2.0)
        assert (kp.gamma, kp.s) == pytest.approx((-1.0, 0.5))
        kp = from_inverse_power_law(3.0)
        assert (kp.gamma, kp.s) == pytest.approx((-1.0 / 3.0, 1.0 / 3.0))

    def test_boundary_rejected(self):
        with pytest.raises(KernelParamsError):
            from_inverse_power_law(4.0)

    def test_round_trip(self):
        for ell in (1.5, 2.0, 2.5, 3.7):
            assert to_inverse_power_law(from_inverse_power_law(ell)) == pytest.approx(ell, rel=1e-14)

    def test_inconsistent_pair(self):
        with pytest.raises(KernelParamsError):
            to_inverse_power_law(KernelParams(-1.0, 0.3))


class TestMaxwellian:

    def test_mass_and_momentum(self):
        grid = make_grid(16, 6.0)
        m = maxwellian(grid)
        assert m.mass() == pytest.approx(1.0, rel=1e-6)
        vx, vy, vz = grid.mesh()
        for v in (vx, vy, vz):
            assert abs(np.sum(m.values * v)) <= 1e-14

    def test_linearity(self, grid6):
        assert np.allclose(maxwellian(grid6, 2.0).values, 2.0 * maxwellian(grid6, 1.0).values, rtol=1e-15)

    def test_rejects_bad_parameters(self, grid4):
        with pytest.raises(KernelParamsError):
            maxwellian(grid4, rho=0.0)
        with pytest.raises(KernelParamsError):
            maxwellian(grid4, T=-1.0)


class TestDistribution:

    def test_rejects_negative_without_report(self, grid4):
        values = np.ones(grid4.shape)
        values[0, 0, 0] = -1.0
        with pytest.raises(GridError):
            Distribution(grid4, values)
        signed = Distribution(grid4, values, positivity_report={'negative': 1.0})
        assert signed.values[0, 0, 0] == -1.0

    def test_rejects_wrong_shape(self, grid4):
        with pytest.raises(GridError):
            Distribution(grid4, np.ones((4, 4)))

    def test_values_are_read_only(self, grid4):
        f = Distribution(grid4, np.ones(grid4.shape))
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 2.0

    def test_binary_layout(self, grid4, tmp_path):
        """Заголовок n, R, t и x как самый быстрый индекс"""
        values = np.arange(grid4.size, dtype=float).reshape(grid4.shape)
        f = Distribution(grid4, values, 0.5)
        data = f.to_bytes()
        assert len(data) == 24 + 8 * grid4.size
        assert np.frombuffer(data, dtype='<f8', offset=24)[1] == values[1, 0, 0]
        loaded = Distribution.load_binary(f.save_binary(tmp_path / 'f.bin'))
        assert np.array_equal(loaded.values, values)
        assert loaded.time_tag == 0.5
        assert loaded.grid == grid4

    def test_csv(self, grid4):
        f = maxwellian(grid4)
        loaded = Distribution.from_csv(f.to_csv())
        assert loaded.grid == grid4
        assert np.allclose(loaded.values, f.values)


class TestClassU:

    def test_maxwellian_passes(self):
        m = maxwellian(make_grid(16, 6.0))
        assert check_class_u(m, ClassUParams(0.9, 10.0)).passed

    def test_zero_fails(self, grid6):
        report = check_class_u(Distribution(grid6, grid6.zeros()), ClassUParams(0.9, 10.0))
        assert not report.mass_ok
        assert not report.passed

    def test_energy_bound(self, maxwell6):
        report = check_class_u(maxwell6, ClassUParams(0.5, 1e-3))
        assert report.mass_ok and not report.energy_ok

    def test_zero_energy_bound_fails(self, maxwell6):
        """e0 = 0: класс пуст, максвеллиан его не проходит"""
        report = check_class_u(maxwell6, ClassUParams(0.5, 0.0))
        assert report.mass_ok and not report.energy_ok
        assert not report.passed

    @pytest.mark.parametrize('d0, e0', [(0.0, 10.0), (0.9, -1.0)])
    def test_rejects_bad_bounds(self, d0, e0):
        with pytest.raises(KernelParamsError):
            ClassUParams(d0, e0)
