# modules/functionals.py
import math
import logging
from dataclasses import dataclass, asdict
from typing import Dict, Any, Iterable, List, Optional

import numpy as np
from scipy import fft
from scipy.optimize import linprog
from scipy.signal import fftconvolve

from modules.collision import (
    AngularQuadrature, _frames, collision_functional_sums, h_functional, interpolate,
    lattice_kernel, q_direct,
)
from modules.errors import FunctionalError, GridError
from modules.kernel_grid import ClassUParams, Distribution, KernelParams, VelocityGrid, check_class_u, phi

logger = logging.getLogger(__name__)

MIN_MC_SAMPLES = 1000
REPORT_KEYS = ('check_name', 'lhs', 'rhs', 'ratio', 'pass', 'n', 'eps_theta', 'delta')

I_P = 'I_p'
J_P = 'J_p'
I_P_UPPER = 'I_p_upper'
I_1 = 'I_1'


@dataclass(frozen=True)
class NormReport:
    p: float
    lp: float
    l1_w: float
    l2_gamma_half: float
    hs_gamma_half_of_fp2: float
    time_tag: Optional[float]
    linf: float = 0.0
    entropy: float = 0.0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class FunctionalValue:
    """Значение функционала; quadrature_error_estimate - стандартная ошибка для Монте-Карло, 0 для квадратуры"""
    kind: str
    value: float
    p: float
    quadrature_error_estimate: float = 0.0
    method: str = 'direct'


@dataclass(frozen=True)
class CoercivityFit:
    c0: float
    c1: float
    success: bool
    n_samples: int
    message: str = ''

    def __iter__(self):
        yield self.c0
        yield self.c1


def _conjugate(p: float) -> float:
    return p / (p - 1.0)


def _is_inf(p) -> bool:
    return isinstance(p, str) and p.lower() in ('inf', 'infinity') or (isinstance(p, float) and math.isinf(p))


def lp_norm(f: Distribution, p, weight: float = 0.0) -> float:
    """‖⟨v⟩^weight f‖_{L^p}; p = inf даёт максимум по узлам"""
    values = np.abs(f.values)
    if weight:
        values = values * f.grid.bracket() ** weight
    if _is_inf(p):
        return float(values.max())
    p = float(p)
    if p < 1.0:
        raise FunctionalError(f"p={p} < 1")
    return float((np.sum(values ** p) * f.grid.cell_volume) ** (1.0 / p))


def weighted_l1(f: Distribution, w: float) -> float:
    """∫ ⟨v⟩^w |f|"""
    return float(np.sum(f.grid.bracket() ** w * np.abs(f.values)) * f.grid.cell_volume)


def weighted_l2(f: Distribution, rho_weight: float) -> float:
    """‖⟨v⟩^rho f‖_{L^2}"""
    weighted = f.grid.bracket() ** rho_weight * f.values
    return float(np.sqrt(np.sum(weighted * weighted) * f.grid.cell_volume))


def _sobolev_sq(values: np.ndarray, grid: VelocityGrid, s_ord: float, rho_weight: float, padding: int) -> float:
    if padding < 2:
        raise FunctionalError(f"padding={padding}: для дробной нормы нужно расширение не меньше 2")
    if not 0.0 <= s_ord < 1.0:
        raise FunctionalError(f"s_ord={s_ord} вне [0, 1)")
    n = grid.n
    size = n * int(padding)
    field = np.zeros((size,) * 3)
    field[:n, :n, :n] = grid.bracket() ** rho_weight * values
    spectrum = fft.fftn(field, workers=-1)
    xi = 2.0 * np.pi * fft.fftfreq(size, d=grid.spacing)
    xi_sq = xi[:, None, None] ** 2 + xi[None, :, None] ** 2 + xi[None, None, :] ** 2
    density = (1.0 + xi_sq) ** s_ord * np.abs(spectrum) ** 2
    return float(density.sum() * grid.cell_volume / size ** 3)


def sobolev_weighted(g: Distribution, s_ord: float, rho_weight: float = 0.0, padding: int = 2) -> float:
    """
    ‖⟨v⟩^rho g‖_{H^s} через дискретное преобразование Фурье

    Поле дополняется нулями до n·padding по каждой оси, частоты ξ = 2π fftfreq(N, h),
    норма: h^3/N^3 Σ ⟨ξ⟩^{2s} |DFT|^2 (при s = 0 это L^2 по Парсевалю).
    """
    return math.sqrt(_sobolev_sq(g.values, g.grid, s_ord, rho_weight, padding))


def norm_report(f: Distribution, p, kp: KernelParams, w: float = 5.0, padding: int = 2) -> NormReport:
    half_power = f.with_values(f.values ** (float(p) / 2.0)) if not _is_inf(p) else f
    return NormReport(
        p=float('inf') if _is_inf(p) else float(p),
        lp=lp_norm(f, p),
        l1_w=weighted_l1(f, w),
        l2_gamma_half=weighted_l2(f, kp.gamma / 2.0),
        hs_gamma_half_of_fp2=sobolev_weighted(half_power, kp.s, kp.gamma / 2.0, padding),
        time_tag=f.time_tag,
        linf=lp_norm(f, 'inf'),
        entropy=h_functional(f),
    )


# Функционалы столкновений

def _check_grids(g: Distribution, f: Distribution):
    if not g.same_grid(f):
        raise GridError(f"Сетки не совпадают: {g.grid} и {f.grid}")


def _check_p(p: float):
    if not p > 1.0:
        raise FunctionalError(f"p={p} должно быть > 1")


def _theta_normalizer(kp: KernelParams) -> float:
    """∫ b dσ по θ ∈ [eps, π/2] в замкнутом виде"""
    two_s = 2.0 * kp.s
    return 2.0 * math.pi * kp.b0 * (kp.eps_theta ** -two_s - (0.5 * math.pi) ** -two_s) / two_s


def _sample_theta(rng, size: int, kp: KernelParams) -> np.ndarray:
    # плотность ∝ θ^{-1-2s} на [eps, π/2]: θ^{-2s} линейна по U
    two_s = 2.0 * kp.s
    lo = kp.eps_theta ** -two_s
    hi = (0.5 * math.pi) ** -two_s
    u = rng.random(size)
    return (lo - u * (lo - hi)) ** (-1.0 / two_s)


def monte_carlo_sums(g: Distribution, f: Distribution, x_weight: np.ndarray, p: float, kp: KernelParams,
                     n_samples: int = 100_000, seed: int = 0, boundary: str = 'zero') -> Dict[str, Dict[str, float]]:
    """
    Оценка сумм I_p, J_p, пары и I_{p-1} методом Монте-Карло

    Пары (v, v*) стратифицированы по диадическим слоям |v - v*|/h, угол θ
    разыгрывается с плотностью ∝ θ^{-1-2s}, φ равномерно.
    """
    _check_grids(g, f)
    if n_samples < MIN_MC_SAMPLES:
        raise FunctionalError(f"n_samples={n_samples} < {MIN_MC_SAMPLES}")
    rng = np.random.default_rng(seed)
    grid = f.grid
    n = grid.n
    h = grid.spacing
    offsets = np.arange(-(n - 1), n)
    ox, oy, oz = (a.ravel() for a in np.meshgrid(offsets, offsets, offsets, indexing='ij'))
    counts = (n - np.abs(ox)) * (n - np.abs(oy)) * (n - np.abs(oz))
    dist = h * np.sqrt(ox * ox + oy * oy + oz * oz)
    keep = dist > 0.0
    ox, oy, oz, counts, dist = ox[keep], oy[keep], oz[keep], counts[keep], dist[keep]
    shells = np.floor(np.log2(dist / h)).astype(int)
    total_pairs = counts.sum()
    z_theta = _theta_normalizer(kp)
    coords = grid.coords
    g_vals, f_vals, x_vals = g.values, f.values, np.asarray(x_weight, dtype=float)
    vol2 = grid.cell_volume ** 2

    names = ('I_p', 'J_p', 'pairing', 'I_p_minus_1')
    estimate = dict.fromkeys(names, 0.0)
    variance = dict.fromkeys(names, 0.0)
    for shell in np.unique(shells):
        sel = shells == shell
        shell_pairs = counts[sel].sum()
        m = max(2, int(round(n_samples * shell_pairs / total_pairs)))
        pick = rng.choice(np.nonzero(sel)[0], size=m, p=counts[sel] / shell_pairs)
        off = np.stack([ox[pick], oy[pick], oz[pick]], axis=1)
        lo = np.maximum(0, off)
        hi = np.minimum(n, n + off)
        i_idx = lo + np.floor(rng.random((m, 3)) * (hi - lo)).astype(int)
        j_idx = i_idx - off
        v = coords[i_idx]
        v_star = coords[j_idx]
        u = v - v_star
        r = np.linalg.norm(u, axis=1)
        k = u / r[:, None]
        e1, e2 = _frames(k)
        theta = _sample_theta(rng, m, kp)
        ang = 2.0 * np.pi * rng.random(m)
        sigma = (np.cos(theta)[:, None] * k
                 + np.sin(theta)[:, None] * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2))
        v_prime = 0.5 * (v + v_star) + 0.5 * r[:, None] * sigma
        y = np.maximum(interpolate(f_vals, grid, v_prime, boundary=boundary), 0.0)
        fi = f_vals[i_idx[:, 0], i_idx[:, 1], i_idx[:, 2]]
        xi = x_vals[i_idx[:, 0], i_idx[:, 1], i_idx[:, 2]]
        gj = g_vals[j_idx[:, 0], j_idx[:, 1], j_idx[:, 2]]
        weight = z_theta * shell_pairs * vol2 * gj * phi(r, kp)
        diff_m = y ** (p - 1.0) - fi ** (p - 1.0)
        samples = {
            'I_p': weight * (y ** p - fi ** p),
            'J_p': weight * (y ** (0.5 * p) - fi ** (0.5 * p)) ** 2,
            'pairing': weight * xi * diff_m,
            'I_p_minus_1': weight * diff_m,
        }
        for name in names:
            estimate[name] += float(samples[name].mean())
            variance[name] += float(samples[name].var(ddof=1)) / m
    return {name: {'value': estimate[name], 'stderr': math.sqrt(variance[name])} for name in names}


def _functional(kind: str, sums_key: str, g: Distribution, f: Distribution, p: float, kp: KernelParams,
                aq: AngularQuadrature, method: str, n_samples: int, seed: int, boundary: str) -> FunctionalValue:
    _check_grids(g, f)
    _check_p(p)
    if method == 'direct':
        sums = collision_functional_sums(g, f, f.values, p, kp, aq, boundary=boundary)
        return FunctionalValue(kind, sums[sums_key], float(p), 0.0, 'direct')
    if method == 'mc':
        sums = monte_carlo_sums(g, f, f.values, p, kp, n_samples=n_samples, seed=seed, boundary=boundary)
        return FunctionalValue(kind, sums[sums_key]['value'], float(p), sums[sums_key]['stderr'], 'mc')
    raise FunctionalError(f"Неизвестный метод: {method}")


def eval_Ip(g: Distribution, f: Distribution, p: float, kp: KernelParams, aq: AngularQuadrature,
            method: str = 'direct', n_samples: int = 100_000, seed: int = 0,
            boundary: str = 'zero') -> FunctionalValue:
    """I_p(g, f) = ∫∫∫ g* [(f')^p - f^p] B"""
    return _functional(I_P, 'I_p', g, f, p, kp, aq, method, n_samples, seed, boundary)


def eval_Jp(g: Distribution, f: Distribution, p: float, kp: KernelParams, aq: AngularQuadrature,
            method: str = 'direct', n_samples: int = 100_000, seed: int = 0,
            boundary: str = 'zero') -> FunctionalValue:
    """J_p(g, f) = ∫∫∫ g* [(f')^{p/2} - f^{p/2}]^2 B"""
    return _functional(J_P, 'J_p', g, f, p, kp, aq, method, n_samples, seed, boundary)


def eval_I1(g: Distribution, f: Distribution, p: float, kp: KernelParams, aq: AngularQuadrature,
            boundary: str = 'zero') -> FunctionalValue:
    """I_{p-1}(g, f) = ∫∫∫ g* [(f')^{p-1} - f^{p-1}] B"""
    _check_grids(g, f)
    _check_p(p)
    sums = collision_functional_sums(g, f, f.values, p, kp, aq, boundary=boundary)
    return FunctionalValue(I_1, sums['I_p_minus_1'], float(p))


def eval_Ip_upper(g: Distribution, f: Distribution, p: float, kp: KernelParams) -> FunctionalValue:
    """
    ∬ g* f^p Φ(|v - v*|) прямым суммированием по парам узлов

    Диагональ (v = v*) входит со значением Φ(0) = δ^γ, если δ > 0.
    """
    _check_grids(g, f)
    grid = f.grid
    kern = lattice_kernel(grid, kp)
    if kp.delta_rel > 0.0:
        kern[grid.n - 1, grid.n - 1, grid.n - 1] = phi(0.0, kp)
    conv = np.maximum(fftconvolve(g.values, kern, mode='same'), 0.0)
    value = float(np.sum(f.values ** p * conv) * grid.cell_volume ** 2)
    return FunctionalValue(I_P_UPPER, value, float(p))


# Проверки неравенств

def report_line(report: Dict[str, Any]) -> str:
    """Строка key=value: сначала стандартные ключи, затем остальные"""
    keys = [k for k in REPORT_KEYS if k in report] + [k for k in report if k not in REPORT_KEYS]
    parts = []
    for key in keys:
        value = report[key]
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = f"{value:.10g}"
        parts.append(f"{key}={value}")
    return ' '.join(parts)


def _base_report(name: str, f: Distribution, kp: Optional[KernelParams] = None) -> Dict[str, Any]:
    report = {'check_name': name, 'n': f.grid.n}
    if kp is not None:
        report['eps_theta'] = kp.eps_theta
        report['delta'] = kp.delta_rel
    return report


def lemma21_coefficients(p: float):
    """(1/p', 1/max{p, p'})"""
    _check_p(p)
    p_conj = _conjugate(p)
    return 1.0 / p_conj, 1.0 / max(p, p_conj)


def lemma21_check(g: Distribution, f: Distribution, p: float, kp: KernelParams, aq: AngularQuadrature,
                  class_u: Optional[ClassUParams] = None, slack_abs: float = 1e-8, slack_rel: float = 1e-3,
                  with_q_direct: bool = False, boundary: str = 'zero') -> Dict[str, Any]:
    """
    ∫ Q(g, f) f^{p-1} <= (1/p') I_p(g, f) - (1/max{p,p'}) J_p(g, f)

    Обе стороны считаются за один проход по одному набору столкновений
    (f' - интерполяция f в v'), поэтому неравенство проверяется почленно.
    with_q_direct=True добавляет Σ Q f^{p-1} h^3 по q_direct как диагностику.
    """
    _check_grids(g, f)
    _check_p(p)
    if class_u is not None:
        status = check_class_u(g, class_u)
        if not status.passed:
            raise FunctionalError(f"g не принадлежит классу U: {status.as_dict()}")
    sums = collision_functional_sums(g, f, f.values, p, kp, aq, boundary=boundary)
    c_i, c_j = lemma21_coefficients(p)
    lhs = sums['pairing']
    rhs = c_i * sums['I_p'] - c_j * sums['J_p']
    slack = slack_abs + slack_rel * abs(rhs)
    report = _base_report('lemma21', f, kp)
    report.update({
        'lhs': lhs, 'rhs': rhs,
        'ratio': lhs / rhs if rhs != 0.0 else 0.0,
        'pass': lhs - rhs <= slack,
        'gap': lhs - rhs, 'p': float(p),
        'I_p': sums['I_p'], 'J_p': sums['J_p'],
    })
    if with_q_direct:
        q = q_direct(g, f, kp, aq, boundary=boundary)
        report['lhs_q_direct'] = float(np.sum(q.q_values * f.values ** (p - 1.0)) * f.grid.cell_volume)
    return report


def coercivity_fit(sample_family: Iterable[Distribution], p: float, kp: KernelParams, aq: AngularQuadrature,
                   g: Optional[Distribution] = None, class_u: Optional[ClassUParams] = None,
                   padding: int = 2) -> CoercivityFit:
    """
    Наибольшее c0 и наименьшее c1 с J_p >= c0 ‖f^{p/2}‖²_{H^s_{γ/2}} - c1 ‖f^{p/2}‖²_{L²_{γ/2}}

    Линейная программа по всем образцам: max c0 - c1 при c0, c1 >= 0.
    По умолчанию g = f для каждого образца.
    """
    family: List[Distribution] = list(sample_family)
    if not family:
        raise FunctionalError("Пустое семейство образцов")
    if len(family) < 10:
        logger.warning(f"Семейство из {len(family)} образцов: оценка констант ненадёжна")
    rows, rhs = [], []
    for f in family:
        if class_u is not None and not check_class_u(f, class_u).passed:
            raise FunctionalError(f"Образец вне класса U (t={f.time_tag})")
        partner = f if g is None else g
        j_value = eval_Jp(partner, f, p, kp, aq).value
        half = f.with_values(f.values ** (0.5 * p))
        a_value = sobolev_weighted(half, kp.s, kp.gamma / 2.0, padding) ** 2
        b_value = weighted_l2(half, kp.gamma / 2.0) ** 2
        rows.append([a_value, -b_value])
        rhs.append(j_value)
    result = linprog(c=[-1.0, 1.0], A_ub=np.array(rows), b_ub=np.array(rhs),
                     bounds=[(0.0, None), (0.0, None)], method='highs')
    if result.status != 0:
        raise FunctionalError(f"Линейная программа не решена ({result.message}): несогласованная квадратура")
    c0, c1 = (float(v) for v in result.x)
    fit = CoercivityFit(c0, c1, c0 > 0.0, len(family), str(result.message))
    logger.info(f"coercivity_fit: c0={c0:.4e}, c1={c1:.4e} по {len(family)} образцам")
    return fit


def _offset_kernel(grid: VelocityGrid, power: float, delta: float) -> np.ndarray:
    offsets = (np.arange(2 * grid.n - 1) - (grid.n - 1)) * grid.spacing
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing='ij')
    return (ox * ox + oy * oy + oz * oz + delta * delta) ** (0.5 * power)


def hardy_check(F: Distribution, ell: float, delta: Optional[float] = None, padding: int = 2,
                bound: Optional[float] = None) -> Dict[str, Any]:
    """
    sup_{v*} ∫ F(v)^2 |v - v*|^{-2ℓ} dv против ‖F‖²_{H^ℓ}

    Ядро сглажено: (|v - v*|^2 + δ^2)^{-ℓ}, δ = h/2 по умолчанию.
    """
    if not 0.0 < ell < 1.0:
        raise FunctionalError(f"ℓ={ell} вне (0, 1)")
    grid = F.grid
    delta = 0.5 * grid.spacing if delta is None else delta
    report = _base_report('hardy', F)
    report['delta'] = delta
    rhs = _sobolev_sq(F.values, grid, ell, 0.0, padding)
    if rhs == 0.0:
        report.update({'lhs': 0.0, 'rhs': 0.0, 'ratio': 0.0, 'pass': True, 'degenerate': True})
        return report
    conv = fftconvolve(F.values ** 2, _offset_kernel(grid, -2.0 * ell, delta), mode='same')
    lhs = float(conv.max() * grid.cell_volume)
    ratio = lhs / rhs
    report.update({'lhs': lhs, 'rhs': rhs, 'ratio': ratio,
                   'pass': bool(np.isfinite(ratio)) and (bound is None or ratio <= bound), 'ell': ell})
    return report


def hls_exponent(alpha: float, p_in: float) -> float:
    """q из 1/q = 1/p - α/3"""
    if not 0.0 < alpha < 3.0:
        raise FunctionalError(f"alpha={alpha} вне (0, 3)")
    if not p_in > 1.0:
        raise FunctionalError(f"p={p_in} должно быть > 1")
    inv_q = 1.0 / p_in - alpha / 3.0
    if inv_q <= 0.0:
        raise FunctionalError(f"1/q = {inv_q:.6g} <= 0: показатель q бесконечен")
    return 1.0 / inv_q


def hls_check(f: Distribution, alpha: float, p_in: float, q_out: Optional[float] = None,
              delta: Optional[float] = None, bound: Optional[float] = None) -> Dict[str, Any]:
    """‖f ∗ |·|^{α-3}‖_q / ‖f‖_p при 1/q = 1/p - α/3"""
    q_expected = hls_exponent(alpha, p_in)
    if q_out is not None and abs(q_out - q_expected) > 1e-12 * q_expected:
        raise FunctionalError(f"q={q_out} не удовлетворяет 1/q = 1/p - α/3 (нужно q={q_expected})")
    grid = f.grid
    delta = 0.5 * grid.spacing if delta is None else delta
    report = _base_report('hls', f)
    report['delta'] = delta
    rhs = lp_norm(f, p_in)
    if rhs == 0.0:
        report.update({'lhs': 0.0, 'rhs': 0.0, 'ratio': 0.0, 'pass': True, 'degenerate': True})
        return report
    conv = fftconvolve(f.values, _offset_kernel(grid, alpha - 3.0, delta), mode='same') * grid.cell_volume
    lhs = float((np.sum(np.abs(conv) ** q_expected) * grid.cell_volume) ** (1.0 / q_expected))
    ratio = lhs / rhs
    report.update({'lhs': lhs, 'rhs': rhs, 'ratio': ratio, 'alpha': alpha, 'p': p_in, 'q': q_expected,
                   'pass': bool(np.isfinite(ratio)) and (bound is None or ratio <= bound)})
    return report


def sobolev_exponent(p: float, s_ord: float) -> float:
    """p_s = 3p / (3 - 2s)"""
    if p < 1.0:
        raise FunctionalError(f"p={p} < 1")
    if not 0.0 < s_ord < 1.0:
        raise FunctionalError(f"s={s_ord} вне (0, 1)")
    return 3.0 * p / (3.0 - 2.0 * s_ord)


def sobolev_embedding_check(f: Distribution, p: float, s_ord: float, gamma: float, padding: int = 2,
                            bound: Optional[float] = None) -> Dict[str, Any]:
    """‖f‖_{L^{p_s}_{γ/2}} / ‖f^{p/2}‖_{H^s_{γ/2}}^{2/p}"""
    p_s = sobolev_exponent(p, s_ord)
    report = _base_report('sobolev_embedding', f)
    lhs = lp_norm(f, p_s, weight=gamma / 2.0)
    half = f.with_values(f.values ** (0.5 * p))
    rhs = sobolev_weighted(half, s_ord, gamma / 2.0, padding) ** (2.0 / p)
    ratio = lhs / rhs if rhs > 0.0 else 0.0
    report.update({'lhs': lhs, 'rhs': rhs, 'ratio': ratio, 'p': p, 'p_s': p_s, 's': s_ord,
                   'pass': bool(np.isfinite(ratio)) and (bound is None or ratio <= bound)})
    return report


def dilate(f: Distribution, lam: float) -> Distribution:
    """F_λ(v) = F(λ v) интерполяцией на той же сетке"""
    vx, vy, vz = f.grid.mesh()
    points = lam * np.stack([vx, vy, vz], axis=-1)
    return f.with_values(np.maximum(interpolate(f.values, f.grid, points), 0.0))


def dilation_sweep(check, f: Distribution, lams=(0.5, 1.0, 2.0), **kwargs) -> Dict[str, Any]:
    """Отношения проверки для F_λ; ограниченность: max/min в пределах порядка"""
    ratios = {lam: check(dilate(f, lam), **kwargs)['ratio'] for lam in lams}
    positive = [r for r in ratios.values() if r > 0.0]
    spread = max(positive) / min(positive) if positive else 1.0
    return {'ratios': ratios, 'spread': spread, 'pass': spread <= 10.0}

