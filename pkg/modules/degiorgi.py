# modules/degiorgi.py
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Any, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from modules.collision import AngularQuadrature, collision_functional_sums, q_direct
from modules.errors import RecursionParamsError, TrajectoryError
from modules.functionals import _sobolev_sq, lemma21_coefficients
from modules.kernel_grid import ClassUParams, Distribution, KernelParams, VERY_SOFT, check_class_u

logger = logging.getLogger(__name__)

STRONG_SOFT = 'strong_soft'
WEAK_SOFT = 'weak_soft'
SINGLE_C = 'single_c'
TWO_C = 'two_c'

SNAP_TOL = 1e-12
MIN_WINDOW_SNAPSHOTS = 4
WINDOW_CHECK_DEPTH = 8


@dataclass(frozen=True)
class LevelSetLadder:
    """
    Лестница уровней K_k = K(1 - 2^{-k}) и моментов времени t_k

    strong_soft: t_k = t*(1 - 2^{-(k+1)})/2 -> t*/2; weak_soft: t_k = t*(1 - 2^{-(k+1)}) -> t*
    """
    K: float
    k_max: int = 40
    schedule_variant: str = STRONG_SOFT
    t_star: float = 1.0

    def __post_init__(self):
        if not self.K > 0.0:
            raise RecursionParamsError(f"K={self.K} должно быть положительным")
        if self.k_max < 1:
            raise RecursionParamsError(f"k_max={self.k_max} < 1")
        if self.schedule_variant not in (STRONG_SOFT, WEAK_SOFT):
            raise RecursionParamsError(f"Неизвестная схема времени: {self.schedule_variant}")
        if not self.t_star > 0.0:
            raise RecursionParamsError(f"t_star={self.t_star} должно быть положительным")

    def level(self, k: float) -> float:
        return self.K * (1.0 - 2.0 ** (-k))

    def time(self, k: int) -> float:
        scale = 0.5 * self.t_star if self.schedule_variant == STRONG_SOFT else self.t_star
        return scale * (1.0 - 2.0 ** (-(k + 1)))

    @property
    def limit_time(self) -> float:
        return 0.5 * self.t_star if self.schedule_variant == STRONG_SOFT else self.t_star

    def levels(self) -> np.ndarray:
        return np.array([self.level(k) for k in range(self.k_max + 1)])

    def times(self) -> np.ndarray:
        return np.array([self.time(k) for k in range(self.k_max + 1)])

    def with_level(self, K: float) -> 'LevelSetLadder':
        return LevelSetLadder(float(K), self.k_max, self.schedule_variant, self.t_star)


def ladder_for(kp: KernelParams, K: float, t_star: float, k_max: int = 40) -> LevelSetLadder:
    """Схема времени по режиму ядра: очень мягкий -> strong_soft"""
    variant = STRONG_SOFT if kp.regime == VERY_SOFT else WEAK_SOFT
    return LevelSetLadder(float(K), int(k_max), variant, float(t_star))


@dataclass
class EnergySequence:
    w: List[float]
    p: float
    c_front: float
    rows: List[Dict[str, float]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=['k', 't_k', 'K_k', 'sup_term', 'integral_term', 'W_k'])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path

    def is_nonincreasing(self, rtol: float = 1e-12) -> bool:
        w = np.asarray(self.w)
        return bool(np.all(w[1:] <= w[:-1] * (1.0 + rtol) + 1e-300))


@dataclass(frozen=True)
class RecursionParams:
    """W_k <= C 2^{ak} K^{-b} W_{k-1}^c или C 2^{ak} K^{-b}(W^{c1} + W^{c2})"""
    C: float
    a: float
    b: float
    W0: float
    K: float
    c: Optional[float] = None
    c1: Optional[float] = None
    c2: Optional[float] = None

    def __post_init__(self):
        for name in ('C', 'a', 'b', 'W0', 'K'):
            if not getattr(self, name) > 0.0:
                raise RecursionParamsError(f"{name}={getattr(self, name)} должно быть положительным")

    def with_K(self, K: float) -> 'RecursionParams':
        return RecursionParams(self.C, self.a, self.b, self.W0, float(K), self.c, self.c1, self.c2)

    def with_W0(self, W0: float) -> 'RecursionParams':
        return RecursionParams(self.C, self.a, self.b, float(W0), self.K, self.c, self.c1, self.c2)


def level_truncate(f: Distribution, K: float, k: int) -> Distribution:
    """f_k = (f - K_k)^+"""
    if not K > 0.0:
        raise RecursionParamsError(f"K={K} должно быть положительным")
    if k < 0:
        raise RecursionParamsError(f"k={k} < 0")
    level = K * (1.0 - 2.0 ** (-k))
    return Distribution(f.grid, np.maximum(f.values - level, 0.0), f.time_tag)


def inhomog_bound_check(fval: float, K: float, k: int, beta: float, alpha: float,
                        rtol: float = 1e-12) -> Dict[str, Any]:
    """1{f >= K_k} <= (2^β - 1)^{-α} (2^k/K)^α f_{k-β}^α в скалярной точке"""
    if not 1.0 <= beta <= k:
        raise RecursionParamsError(f"β={beta} вне [1, {k}]")
    if alpha < 0.0:
        raise RecursionParamsError(f"α={alpha} < 0")
    if fval < 0.0 or not K > 0.0:
        raise RecursionParamsError("Нужно f >= 0 и K > 0")
    level_k = K * (1.0 - 2.0 ** (-k))
    level_shift = K * (1.0 - 2.0 ** (-(k - beta)))
    lhs = 1.0 if fval >= level_k else 0.0
    f_shift = max(fval - level_shift, 0.0)
    rhs = (1.0 / (2.0 ** beta - 1.0)) ** alpha * (2.0 ** k / K) ** alpha * f_shift ** alpha
    return {
        'check_name': 'inhomog_bound', 'lhs': lhs, 'rhs': rhs,
        'ratio': lhs / rhs if rhs > 0.0 else 0.0,
        'pass': lhs <= rhs * (1.0 + rtol),
        'fval': fval, 'K': K, 'k': k, 'beta': beta, 'alpha': alpha,
    }


def trajectory_snapshots(trajectory) -> List[Distribution]:
    """Снимки траектории по возрастанию времени"""
    snaps = list(getattr(trajectory, 'snapshots', trajectory))
    if not snaps:
        raise TrajectoryError("Пустая траектория")
    if any(s.time_tag is None for s in snaps):
        raise TrajectoryError("У снимков траектории должно быть время")
    return sorted(snaps, key=lambda s: s.time_tag)


def check_sparsity(times: Sequence[float], ladder: LevelSetLadder, depth: int = WINDOW_CHECK_DEPTH) -> None:
    """Не меньше MIN_WINDOW_SNAPSHOTS снимков в каждом окне [t_{k-1}, t_k] для k <= depth"""
    times = np.asarray(times)
    tol = SNAP_TOL * ladder.t_star
    if times.max() < ladder.t_star - 1e-9 * ladder.t_star:
        raise TrajectoryError(f"Траектория обрывается на t={times.max():.6g} < t*={ladder.t_star:.6g}")
    for k in range(1, min(depth, ladder.k_max) + 1):
        lo, hi = ladder.time(k - 1), ladder.time(k)
        count = int(np.sum((times >= lo - tol) & (times <= hi + tol)))
        if count < MIN_WINDOW_SNAPSHOTS:
            raise TrajectoryError(
                f"В окне [{lo:.6g}, {hi:.6g}] (k={k}) {count} снимков, нужно не меньше {MIN_WINDOW_SNAPSHOTS}")


def _level_terms(snaps: List[Distribution], level: float, p: float, kp: KernelParams, padding: int):
    lp_terms, hs_terms = [], []
    for snap in snaps:
        fk = np.maximum(snap.values - level, 0.0)
        if not np.any(fk > 0.0):
            lp_terms.append(0.0)
            hs_terms.append(0.0)
            continue
        lp_terms.append(float(np.sum(fk ** p) * snap.grid.cell_volume))
        hs_terms.append(_sobolev_sq(fk ** (0.5 * p), snap.grid, kp.s, 0.5 * kp.gamma, padding))
    return np.array(lp_terms), np.array(hs_terms)


def energy_sequence(trajectory, ladder: LevelSetLadder, p: float, kp: KernelParams, c_front: float = 1.0,
                    ks: Optional[Iterable[int]] = None, window_check_depth: int = WINDOW_CHECK_DEPTH,
                    padding: int = 2) -> EnergySequence:
    """
    W_k = sup_{t in [t_k, t*]} ‖f_k‖_p^p + c_front ∫_{t_k}^{t*} ‖f_k^{p/2}‖²_{H^s_{γ/2}}

    sup берётся по сохранённым снимкам, интеграл - по формуле трапеций.
    """
    if not p > 1.0:
        raise RecursionParamsError(f"p={p} должно быть > 1")
    snaps = trajectory_snapshots(trajectory)
    times = np.array([s.time_tag for s in snaps])
    check_sparsity(times, ladder, window_check_depth)
    tol = SNAP_TOL * ladder.t_star
    ks = list(range(ladder.k_max + 1)) if ks is None else list(ks)
    w, rows = [], []
    for k in ks:
        t_k = ladder.time(k)
        in_range = (times >= t_k - tol) & (times <= ladder.t_star + tol)
        window = [s for s, keep in zip(snaps, in_range) if keep]
        level = ladder.level(k)
        lp_terms, hs_terms = _level_terms(window, level, p, kp, padding)
        sup_term = float(lp_terms.max()) if len(lp_terms) else 0.0
        integral = float(trapezoid(hs_terms, times[in_range])) if len(window) > 1 else 0.0
        value = sup_term + c_front * integral
        w.append(value)
        rows.append({'k': k, 't_k': t_k, 'K_k': level, 'sup_term': sup_term,
                     'integral_term': integral, 'W_k': value})
    return EnergySequence(w, float(p), float(c_front), rows)


# Рекурсия

def _check_exponents(params: RecursionParams, variant: str):
    if variant == SINGLE_C:
        if params.c is None or not params.c > 1.0:
            raise RecursionParamsError(f"c={params.c}: нужно c > 1")
    elif variant == TWO_C:
        if params.c1 is None or params.c2 is None:
            raise RecursionParamsError("Вариант two_c требует c1 и c2")
        if not 1.0 < params.c1 <= params.c2:
            raise RecursionParamsError(f"Нужно 1 < c1 <= c2, получено c1={params.c1}, c2={params.c2}")
    else:
        raise RecursionParamsError(f"Неизвестный вариант рекурсии: {variant}")


def recursion_threshold(params: RecursionParams, variant: str = SINGLE_C) -> float:
    """Порог K, при котором W_k <= W0 2^{-ak/(c-1)}"""
    _check_exponents(params, variant)
    C, a, b, W0 = params.C, params.a, params.b, params.W0
    if variant == SINGLE_C:
        c = params.c
        return (C * 2.0 ** (a * c / (c - 1.0)) * W0 ** (c - 1.0)) ** (1.0 / b)
    c1, c2 = params.c1, params.c2
    shift = a * c1 / (c1 - 1.0)
    r0 = max(C * 2.0 ** (c2 + shift) * W0 ** (c1 + c2 - 2.0), C * 2.0 ** (1.0 + shift) * W0 ** (c1 - 1.0))
    return r0 ** (1.0 / b)


def _power(x: float, e: float) -> float:
    try:
        return x ** e
    except OverflowError:
        return math.inf


def verify_decay(params: RecursionParams, variant: str = SINGLE_C, k_max: int = 20,
                 snap_tol: float = SNAP_TOL) -> Dict[str, Any]:
    """
    Итерация рекурсии с равенством из W0 и сравнение с W0 2^{-ak/(c-1)}

    Итерируется нормированная величина ρ_k = W_k / (W0 2^{-ak/(c-1)}); значения в
    пределах snap_tol от 1 приравниваются к 1.
    """
    _check_exponents(params, variant)
    threshold = recursion_threshold(params, variant)
    below = params.K < threshold * (1.0 - snap_tol)
    if below:
        logger.warning(f"K={params.K:.6g} ниже порога {threshold:.6g}: ожидается нарушение оценки")
    C, a, b, W0, K = params.C, params.a, params.b, params.W0, params.K
    c = params.c if variant == SINGLE_C else params.c1
    rate = a / (c - 1.0)
    lam = C * 2.0 ** (a * c / (c - 1.0)) * W0 ** (c - 1.0) * K ** (-b)
    if abs(lam - 1.0) <= snap_tol:
        lam = 1.0

    rho = 1.0
    w, bounds, rhos = [W0], [W0], [1.0]
    first_violation = None
    for k in range(1, k_max + 1):
        if math.isinf(rho):
            nxt = math.inf
        elif variant == SINGLE_C:
            nxt = lam * _power(rho, c)
        else:
            previous_bound = W0 * 2.0 ** (-rate * (k - 1))
            nxt = lam * _power(rho, params.c1) + lam * _power(previous_bound, params.c2 - params.c1) * _power(rho, params.c2)
        if abs(nxt - 1.0) <= snap_tol:
            nxt = 1.0
        rho = nxt
        bound = W0 * 2.0 ** (-rate * k)
        rhos.append(rho)
        bounds.append(bound)
        w.append(rho * bound)
        if first_violation is None and rho > 1.0 + snap_tol:
            first_violation = k
    return {
        'check_name': 'verify_decay',
        'variant': variant,
        'lhs': max(rhos[1:]) if k_max else 1.0,
        'rhs': 1.0,
        'pass': first_violation is None,
        'threshold': threshold,
        'K': K,
        'below_threshold': below,
        'first_violation': first_violation,
        'w': w,
        'bounds': bounds,
        'rho': rhos,
    }


def level_energy_inequality_check(f: Distribution, ladder: LevelSetLadder, k: int, p: float, kp: KernelParams,
                                  aq: AngularQuadrature, class_u: Optional[ClassUParams] = None,
                                  slack_abs: float = 1e-8, slack_rel: float = 1e-3,
                                  with_q_direct: bool = False) -> Dict[str, Any]:
    """
    ∫ Q(f, f) f_k^{p-1} <= K_k I_{p-1}(f, f_k) + (1/p') I_p(f, f_k) - (1/max{p,p'}) J_p(f, f_k)

    Все члены - за один проход по одному набору столкновений.
    """
    if k < 1:
        raise RecursionParamsError(f"k={k} < 1")
    if class_u is not None and not check_class_u(f, class_u).passed:
        raise RecursionParamsError("f не принадлежит классу U")
    fk = level_truncate(f, ladder.K, k)
    level = ladder.level(k)
    sums = collision_functional_sums(f, fk, f.values, p, kp, aq)
    c_i, c_j = lemma21_coefficients(p)
    lhs = sums['pairing']
    rhs = level * sums['I_p_minus_1'] + c_i * sums['I_p'] - c_j * sums['J_p']
    report = {
        'check_name': 'level_energy_inequality',
        'lhs': lhs, 'rhs': rhs,
        'ratio': lhs / rhs if rhs != 0.0 else 0.0,
        'pass': lhs - rhs <= slack_abs + slack_rel * abs(rhs),
        'n': f.grid.n, 'eps_theta': kp.eps_theta, 'delta': kp.delta_rel,
        'k': k, 'K': ladder.K, 'K_k': level, 'p': float(p),
        'I_p': sums['I_p'], 'J_p': sums['J_p'], 'I_p_minus_1': sums['I_p_minus_1'],
    }
    if with_q_direct:
        q = q_direct(f, f, kp, aq)
        report['lhs_q_direct'] = float(np.sum(q.q_values * fk.values ** (p - 1.0)) * f.grid.cell_volume)
    return report


@dataclass(frozen=True)
class SearchConfig:
    k_max: int = 40
    tol_zero_rel: float = 1e-10
    rel_tol: float = 1e-9
    max_iter: int = 200
    c_front: float = 1.0
    schedule_variant: Optional[str] = None
    t_star: Optional[float] = None
    soundness_tol: float = 1e-6
    window_check_depth: int = WINDOW_CHECK_DEPTH
    padding: int = 2


def estimate_linfty(trajectory, p: float, kp: KernelParams, search_config: SearchConfig = SearchConfig()):
    """
    Наименьший K, при котором W_{k_max} падает ниже tol_zero = tol_zero_rel·W0

    W_{k_max} монотонно не возрастает по K, поэтому каждый шаг бисекции считает
    только W_{k_max}; полная последовательность считается один раз для K_star.

    Returns:
        (K_star, diagnostics)
    """
    snaps = trajectory_snapshots(trajectory)
    t_star = search_config.t_star or snaps[-1].time_tag
    variant = search_config.schedule_variant or (STRONG_SOFT if kp.regime == VERY_SOFT else WEAK_SOFT)
    base = LevelSetLadder(1.0, search_config.k_max, variant, t_star)
    kwargs = {'c_front': search_config.c_front, 'window_check_depth': search_config.window_check_depth,
              'padding': search_config.padding}

    w0 = energy_sequence(snaps, base, p, kp, ks=[0], **kwargs).w[0]
    tol_zero = search_config.tol_zero_rel * w0
    in_horizon = [s for s in snaps if base.time(0) - SNAP_TOL * t_star <= s.time_tag <= t_star * (1 + SNAP_TOL)]
    sup_all = max(float(s.values.max()) for s in in_horizon)
    # оценка L^∞ утверждается на [t*/2, t*] при любой схеме лестницы
    window = [s for s in snaps if 0.5 * t_star * (1 - SNAP_TOL) <= s.time_tag <= t_star * (1 + SNAP_TOL)]
    if not window:
        raise TrajectoryError(f"Нет снимков на [{0.5 * t_star:.6g}, {t_star:.6g}]")
    sup_window = max(float(s.values.max()) for s in window)
    ladder_window = [s for s in window if s.time_tag >= base.limit_time - SNAP_TOL * t_star]
    sup_ladder = max((float(s.values.max()) for s in ladder_window), default=sup_window)

    def top_energy(K: float) -> float:
        return energy_sequence(snaps, base.with_level(K), p, kp, ks=[search_config.k_max], **kwargs).w[0]

    lo, hi = 0.0, 2.0 * sup_all if sup_all > 0.0 else 1.0
    if top_energy(hi) > tol_zero:
        raise TrajectoryError(f"Бисекция не локализована: W_kmax({hi:.6g}) > {tol_zero:.3e}")
    iterations = 0
    while hi - lo > search_config.rel_tol * hi and iterations < search_config.max_iter:
        mid = 0.5 * (lo + hi)
        value = top_energy(mid)
        logger.debug(f"estimate_linfty: K={mid:.10g}, W_kmax={value:.3e}")
        if value <= tol_zero:
            hi = mid
        else:
            lo = mid
        iterations += 1
    k_star = hi
    sequence = energy_sequence(snaps, base.with_level(k_star), p, kp, **kwargs)
    sound = k_star >= sup_window - search_config.soundness_tol * max(1.0, sup_window)
    if not sound:
        logger.warning(f"K*={k_star:.6g} ниже sup f={sup_window:.6g} на [t*/2, t*] (схема {variant})")
    diagnostics = {
        'check_name': 'estimate_linfty',
        'lhs': sup_window, 'rhs': k_star,
        'pass': sound,
        'K_star': k_star,
        'sup_window': sup_window,
        'sup_ladder_window': sup_ladder,
        'ladder_limit_time': base.limit_time,
        'soundness_gap': sup_window - k_star,
        'sup_all': sup_all,
        'W0': w0,
        'tol_zero': tol_zero,
        'iterations': iterations,
        'schedule_variant': variant,
        't_star': t_star,
        'sequence': sequence,
    }
    logger.info(f"estimate_linfty: K*={k_star:.6g}, sup на окне {sup_window:.6g}, {iterations} итераций")
    return k_star, diagnostics
