"""
Быстрое вычисление Q через спектральные сдвиги
"""
import numpy as np
import pytest

from modules.collision import AngularQuadrature, loss_rate, q_direct
from modules.errors import GridError, QuadratureError
from modules.experiments import benchmark_fast_path
from modules.fast_spectral import SpectralConfig, q_fast
from modules.kernel_grid import Distribution, KernelParams, make_grid, maxwellian


@pytest.fixture
def spectral(angular):
    return SpectralConfig(n_rho=4, lebedev_order=3, angular=angular)


class TestSpectralConfig:

    def test_padding_below_two(self):
        with pytest.raises(QuadratureError):
            SpectralConfig(padding=1)

    def test_bad_radial_rule(self):
        with pytest.raises(QuadratureError):
            SpectralConfig(n_rho=1)


class TestQFast:

    def test_zero_input(self, grid6, kernel6, spectral):
        zero = Distribution(grid6, grid6.zeros())
        assert np.allclose(q_fast(zero, zero, kernel6, spectral).q_values, 0.0)

    def test_loss_matches_direct_loss(self, bump6, kernel6, spectral):
        """Потери считаются той же свёрткой, что и шаг по времени"""
        out = q_fast(bump6, bump6, kernel6, spectral)
        expected = bump6.values * loss_rate(bump6, kernel6, spectral.angular)
        assert np.allclose(out.loss, expected)
        assert out.eval_stats['solver'] == 'fast'
        assert out.eval_stats['kernel_evals'] > 0

    def test_grid_mismatch(self, maxwell6, kernel6, spectral):
        with pytest.raises(GridError):
            q_fast(maxwell6, maxwellian(make_grid(6, 3.0)), kernel6, spectral)

    def test_total_gain_close_to_direct(self, bump6, kernel6, angular):
        """Полный прирост согласуется с прямой квадратурой по порядку величины"""
        fast = q_fast(bump6, bump6, kernel6, SpectralConfig(angular=angular))
        direct = q_direct(bump6, bump6, kernel6, angular)
        ratio = fast.gain.sum() / direct.gain.sum()
        assert 0.5 < ratio < 2.0, f"Отношение приростов {ratio:.3f}"

    @pytest.mark.slow
    def test_benchmark_table(self, tmp_path):
        frame = benchmark_fast_path((8, 12), kp=KernelParams(-1.0, 0.5, eps_theta=0.1),
                                    aq=AngularQuadrature(8, 4), csv_path=tmp_path / 'bench.csv')
        assert list(frame['n']) == [8, 12]
        assert (tmp_path / 'bench.csv').exists()
        assert frame['rel_l2'].iloc[-1] < frame['rel_l2'].iloc[0], "Расхождение не убывает при измельчении"
