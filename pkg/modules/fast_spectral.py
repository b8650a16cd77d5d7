# modules/fast_spectral.py
import time
import logging
from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.integrate import lebedev_rule
from scipy.special import roots_legendre

from modules.collision import AngularQuadrature, CollisionOutput, loss_rate, _check_pair
from modules.errors import QuadratureError
from modules.kernel_grid import Distribution, KernelParams, phi

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralConfig:
    """
    Параметры быстрого вычисления прироста

    Args:
        padding: во сколько раз расширяется сетка под FFT (>= 2, иначе сдвиги заворачиваются)
        n_rho: число узлов Гаусса-Лежандра по |v - v*| на [0, 2R]
        lebedev_order: порядок квадратуры Лебедева для направления v - v*
        angular: квадратура по σ относительно направления
    """
    padding: int = 2
    n_rho: int = 8
    lebedev_order: int = 7
    angular: AngularQuadrature = AngularQuadrature(n_theta=8, n_phi=4)
    batch: int = 16

    def __post_init__(self):
        if self.padding < 2:
            raise QuadratureError(f"padding={self.padding}: спектральные сдвиги требуют расширения не меньше 2")
        if self.n_rho < 2:
            raise QuadratureError(f"n_rho={self.n_rho} < 2")
        if self.batch < 1:
            raise QuadratureError(f"batch={self.batch} < 1")


def _sphere_rule(order: int):
    try:
        points, weights = lebedev_rule(order)
    except Exception as e:
        raise QuadratureError(f"Квадратура Лебедева порядка {order} недоступна: {e}")
    return points.T, weights


def _sigma_directions(e_hat: np.ndarray, aq: AngularQuadrature, kp: KernelParams):
    """Узлы σ вокруг направления e_hat и веса b·sin θ dθ dφ"""
    tab = aq.tables(kp)
    a = np.array([0.0, 1.0, 0.0]) if abs(e_hat[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(e_hat, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e_hat, e1)
    ct, st = tab['ct'][:, None, None], tab['st'][:, None, None]
    sigma = ct * e_hat + st * (tab['cphi'][None, :, None] * e1 + tab['sphi'][None, :, None] * e2)
    weights = np.repeat(tab['aw'][:, None], len(tab['cphi']), axis=1)
    return sigma.reshape(-1, 3), weights.ravel()


def q_fast(g: Distribution, f: Distribution, kp: KernelParams,
           config: SpectralConfig = SpectralConfig()) -> CollisionOutput:
    """
    Q(g, f) через спектральные сдвиги

    Прирост: Σ_{ρ, ê, σ} w ρ^2 Φ(ρ) b · g(v - ρ(ê+σ)/2) f(v - ρ(ê-σ)/2),
    где сдвиги выполняются умножением на фазу в пространстве Фурье.
    Потери совпадают с q_direct: f(v) Σ_{v*≠v} g(v*) Φ h^3 · Σ b·вес.
    """
    _check_pair(g, f)
    grid = f.grid
    n = grid.n
    h = grid.spacing
    size = n * config.padding
    started = time.perf_counter()

    g_pad = np.zeros((size,) * 3)
    f_pad = np.zeros((size,) * 3)
    g_pad[:n, :n, :n] = g.values
    f_pad[:n, :n, :n] = f.values
    g_hat = fft.fftn(g_pad, workers=-1)
    f_hat = fft.fftn(f_pad, workers=-1)
    freq = 2.0 * np.pi * fft.fftfreq(size, d=h)

    rho_max = 2.0 * grid.radius
    u, w = roots_legendre(config.n_rho)
    rho_nodes = 0.5 * rho_max * (u + 1.0)
    rho_weights = 0.5 * rho_max * w
    directions, dir_weights = _sphere_rule(config.lebedev_order)

    def shifted(spectrum, shifts):
        # spectrum(ξ) e^{-iξ·a} для каждого сдвига a
        px = np.exp(-1j * shifts[:, 0, None] * freq[None, :])
        py = np.exp(-1j * shifts[:, 1, None] * freq[None, :])
        pz = np.exp(-1j * shifts[:, 2, None] * freq[None, :])
        phase = px[:, :, None, None] * py[:, None, :, None] * pz[:, None, None, :]
        return fft.ifftn(spectrum[None] * phase, axes=(1, 2, 3), workers=-1).real[:, :n, :n, :n]

    gain = np.zeros(grid.shape)
    evals = 0
    for rho, w_rho in zip(rho_nodes, rho_weights):
        radial = w_rho * rho * rho * phi(rho, kp)
        for e_hat, w_e in zip(directions, dir_weights):
            sigma, w_sigma = _sigma_directions(e_hat, config.angular, kp)
            for start in range(0, len(sigma), config.batch):
                block = sigma[start:start + config.batch]
                g_shift = shifted(g_hat, 0.5 * rho * (e_hat[None, :] + block))
                f_shift = shifted(f_hat, 0.5 * rho * (e_hat[None, :] - block))
                weights = radial * w_e * w_sigma[start:start + config.batch]
                gain += np.tensordot(weights, g_shift * f_shift, axes=(0, 0))
                evals += len(block)

    loss = f.values * loss_rate(g, kp, config.angular)
    wall_ms = (time.perf_counter() - started) * 1e3
    stats = {
        'solver': 'fast',
        'kernel_evals': int(evals),
        'wall_ms': wall_ms,
        'leakage': 0.0,
        'padding': config.padding,
    }
    logger.debug(f"q_fast n={n}: {evals} сдвигов за {wall_ms:.1f} мс")
    return CollisionOutput(grid, gain - loss, gain, loss, stats)
