# modules/checks.py
import math
import time
import logging
from fractions import Fraction
from typing import Any, Callable, Dict, Sequence

import numpy as np

from modules.analysis_params import (
    admissible_range, check_landau_consistency, solve_lemma26, solve_theta1011, solve_theta3, solve_theta67_r,
    solve_theta89_lq,
)
from modules.collision import (
    AngularQuadrature, h_functional, moments, q_direct, q_pairing_direct, q_weak_pairing_asym, q_weak_pairing_sym,
)
from modules.degiorgi import SINGLE_C, TWO_C, RecursionParams, SearchConfig, estimate_linfty, inhomog_bound_check, \
    recursion_threshold, verify_decay
from modules.errors import ConfigError, InfeasibleSystemError
from modules.experiments import (
    CollisionSolver, ExperimentConfig, benchmark_fast_path, gaussian_bump, ode_comparison_check, run_lp_generation,
    step, window_times,
)
from modules.functionals import (
    coercivity_fit, dilation_sweep, hardy_check, hls_check, lemma21_check, sobolev_embedding_check,
)
from modules.kernel_grid import ClassUParams, Distribution, KernelParams, check_class_u, make_grid, maxwellian

logger = logging.getLogger(__name__)

WORKED_VALUES = {'theta3': 0.75, 'alpha1': 3.0, 'theta7': 2.0 / 3.0, 'r': 2.3133, 'alpha3': 1.1517}


def _kernel(grid, gamma: float, s: float, eps_theta: float) -> KernelParams:
    return KernelParams(gamma, s, eps_theta=eps_theta, delta_rel=0.5 * grid.spacing)


def random_density(grid, rng) -> Distribution:
    """Максвеллиан со случайными параметрами плюс случайный горб"""
    m = maxwellian(grid, rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5, 3), rng.uniform(0.6, 1.5))
    bump = gaussian_bump(grid, rng.uniform(-1.5, 1.5, 3), rng.uniform(0.6, 1.2), rng.uniform(0.1, 0.8))
    return Distribution(grid, m.values + bump)


def check_equilibrium(n_list: Sequence[int] = (8, 12, 16), radius: float = 6.0, gamma: float = -1.0,
                      s: float = 0.5, eps_theta: float = 0.05, n_theta: int = 16, n_phi: int = 8,
                      tol: float = 1e-3) -> Dict[str, Any]:
    """max|Q(M, M)| убывает по n; на последней сетке не больше tol·max M"""
    aq = AngularQuadrature(n_theta, n_phi)
    residuals = []
    started = time.perf_counter()
    for n in n_list:
        grid = make_grid(n, radius)
        m = maxwellian(grid)
        q = q_direct(m, m, _kernel(grid, gamma, s, eps_theta), aq, deposit='quadratic')
        residuals.append(float(np.abs(q.q_values).max() / m.values.max()))
        logger.info(f"equilibrium n={n}: max|Q(M,M)|/max M = {residuals[-1]:.3e}")
    decreasing = all(b < a for a, b in zip(residuals, residuals[1:]))
    return {'check_name': 'equilibrium', 'lhs': residuals[-1], 'rhs': tol, 'residuals': residuals,
            'n_list': list(n_list), 'decreasing': decreasing, 'wall_s': time.perf_counter() - started,
            'pass': decreasing and residuals[-1] <= tol}


def check_conservation(n: int = 8, radius: float = 6.0, steps: int = 50, gamma: float = -1.0, s: float = 0.5,
                       eps_theta: float = 0.05, n_theta: int = 8, n_phi: int = 4, dt_safety: float = 0.5,
                       mass_tol: float = 1e-4, energy_tol: float = 1e-3, entropy_slack: float = 1e-8) -> Dict[str, Any]:
    """rk3_ssp-шаги на горбе: дрейф массы и энергии, H не возрастает на каждом шаге"""
    grid = make_grid(n, radius)
    solver = CollisionSolver(_kernel(grid, gamma, s, eps_theta), AngularQuadrature(n_theta, n_phi))
    f = Distribution(grid, gaussian_bump(grid, (0.8, 0.0, 0.0), 1.0, 1.0), 0.0)
    mass0, _, energy0 = moments(f)
    entropies = [h_functional(f)]
    for _ in range(steps):
        f = step(f, solver.dt_max(f, dt_safety), 'rk3_ssp', solver, dt_safety)
        entropies.append(h_functional(f))
    mass, _, energy = moments(f)
    mass_drift = abs(mass / mass0 - 1.0)
    energy_drift = abs(energy / energy0 - 1.0)
    h_ok = bool(np.all(np.diff(entropies) <= entropy_slack))
    return {'check_name': 'conservation', 'lhs': mass_drift, 'rhs': mass_tol, 'mass_drift': mass_drift,
            'energy_drift': energy_drift, 'entropy_nonincreasing': h_ok, 'steps': steps,
            'pass': mass_drift <= mass_tol and energy_drift <= energy_tol and h_ok}


def check_weak_form_triangle(n: int = 8, radius: float = 6.0, draws: int = 20, seed: int = 0, gamma: float = -1.0,
                             s: float = 0.5, eps_theta: float = 0.05, n_theta: int = 8, n_phi: int = 4,
                             rtol: float = 1e-6) -> Dict[str, Any]:
    """
    Три вычисления ∫Q(g,f)φ на случайных (g, f, φ) попарно совпадают

    Прямое и асимметричное симметризуются по (g, f); φ берётся интерполянтом.
    """
    grid = make_grid(n, radius)
    kp = _kernel(grid, gamma, s, eps_theta)
    aq = AngularQuadrature(n_theta, n_phi)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        g, f = random_density(grid, rng), random_density(grid, rng)
        coeffs = rng.normal(size=4)

        def phi_fn(v, c=coeffs):
            return c[0] + c[1] * v[..., 0] + c[2] * np.sin(v[..., 1]) + c[3] * np.exp(-0.5 * np.sum(v * v, axis=-1))

        direct = 0.5 * (q_pairing_direct(q_direct(g, f, kp, aq), phi_fn) + q_pairing_direct(q_direct(f, g, kp, aq), phi_fn))
        asym = 0.5 * (q_weak_pairing_asym(g, f, phi_fn, kp, aq, interpolate_phi=True)
                      + q_weak_pairing_asym(f, g, phi_fn, kp, aq, interpolate_phi=True))
        sym = q_weak_pairing_sym(g, f, phi_fn, kp, aq, interpolate_phi=True)
        scale = max(abs(direct), abs(asym), abs(sym), 1e-300)
        worst = max(worst, abs(direct - asym) / scale, abs(direct - sym) / scale, abs(asym - sym) / scale)
    return {'check_name': 'weak_form_triangle', 'lhs': worst, 'rhs': rtol, 'draws': draws, 'pass': worst <= rtol}


def check_lemma21(n: int = 8, radius: float = 6.0, pairs: int = 200, p_list: Sequence[float] = (1.5, 2.0, 3.0),
                  seed: int = 0, gamma: float = -1.0, s: float = 0.5, eps_theta: float = 0.05, n_theta: int = 8,
                  n_phi: int = 4) -> Dict[str, Any]:
    """Неравенство для ∫Q(g,f)f^{p-1} на случайных парах класса U"""
    grid = make_grid(n, radius)
    kp = _kernel(grid, gamma, s, eps_theta)
    aq = AngularQuadrature(n_theta, n_phi)
    rng = np.random.default_rng(seed)
    violations, worst_gap = [], -math.inf
    for i in range(pairs):
        g, f = random_density(grid, rng), random_density(grid, rng)
        class_u = ClassUParams(0.5 * g.mass(), 2.0 * check_class_u(g, ClassUParams(1.0, 1.0)).entropy_energy)
        for p in p_list:
            report = lemma21_check(g, f, p, kp, aq, class_u=class_u)
            worst_gap = max(worst_gap, report['gap'] - 1e-8 - 1e-3 * abs(report['rhs']))
            if not report['pass']:
                violations.append({'pair': i, 'p': p, 'gap': report['gap']})
    return {'check_name': 'lemma21', 'lhs': worst_gap, 'rhs': 0.0, 'pairs': pairs, 'violations': violations,
            'pass': not violations}


def coercivity_family(grid, size: int = 20, seed: int = 0):
    """Максвеллианы и горбы с разными центрами и ширинами"""
    rng = np.random.default_rng(seed)
    family = []
    for i in range(size):
        if i % 2 == 0:
            family.append(maxwellian(grid, rng.uniform(0.5, 1.5), rng.uniform(-0.5, 0.5, 3), rng.uniform(0.6, 1.5)))
        else:
            family.append(Distribution(grid, gaussian_bump(grid, rng.uniform(-1.0, 1.0, 3), rng.uniform(0.7, 1.3),
                                                           rng.uniform(0.5, 1.5))))
    return family


def check_coercivity(n_list: Sequence[int] = (8, 12), radius: float = 6.0, members: int = 20, p: float = 2.0,
                     seed: int = 0, gamma: float = -1.0, s: float = 0.5, eps_theta: float = 0.05, n_theta: int = 8,
                     n_phi: int = 4, ratio: float = 2.0) -> Dict[str, Any]:
    """c0 > 0 на семействе и устойчив в пределах ratio между сетками"""
    fits = []
    for n in n_list:
        grid = make_grid(n, radius)
        fit = coercivity_fit(coercivity_family(grid, members, seed), p, _kernel(grid, gamma, s, eps_theta),
                             AngularQuadrature(n_theta, n_phi))
        fits.append({'n': n, 'c0': fit.c0, 'c1': fit.c1})
    c0 = [f['c0'] for f in fits]
    spread = max(c0) / min(c0) if min(c0) > 0.0 else math.inf
    return {'check_name': 'coercivity', 'lhs': spread, 'rhs': ratio, 'fits': fits,
            'pass': min(c0) > 0.0 and spread <= ratio}


def check_inhomog(draws: int = 10 ** 6, seed: int = 0, k_max: int = 40) -> Dict[str, Any]:
    """Скалярная оценка индикатора уровня на случайных (f, K, k, β, α)"""
    rng = np.random.default_rng(seed)
    ks = rng.integers(1, k_max + 1, draws)
    betas = 1.0 + rng.random(draws) * (ks - 1)
    alphas = rng.uniform(0.0, 4.0, draws)
    levels = rng.uniform(0.1, 10.0, draws)
    fvals = levels * rng.uniform(0.0, 2.0, draws)
    violations = 0
    for fval, K, k, beta, alpha in zip(fvals, levels, ks, betas, alphas):
        if not inhomog_bound_check(float(fval), float(K), int(k), float(beta), float(alpha))['pass']:
            violations += 1
    return {'check_name': 'inhomog', 'lhs': violations, 'rhs': 0, 'draws': draws, 'pass': violations == 0}


def _random_recursion(rng) -> tuple:
    variant = SINGLE_C if rng.random() < 0.5 else TWO_C
    base = dict(C=rng.uniform(0.5, 2.0), a=rng.uniform(0.5, 2.0), b=rng.uniform(0.5, 2.0), W0=rng.uniform(0.1, 10.0),
                K=1.0)
    if variant == SINGLE_C:
        base['c'] = rng.uniform(1.1, 2.0)
    else:
        base['c1'] = rng.uniform(1.1, 2.0)
        base['c2'] = base['c1'] + rng.uniform(0.0, 1.0)
    return RecursionParams(**base), variant


def check_decay(draws: int = 1000, k_max: int = 40, seed: int = 0) -> Dict[str, Any]:
    """
    Убывание W_k <= W0 2^{-ak/(c-1)} при K на пороге и в 10 раз выше;
    контроль: при K = порог/4 нарушение хотя бы в половине розыгрышей
    """
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    violations, control_hits = 0, 0
    for _ in range(draws):
        params, variant = _random_recursion(rng)
        threshold = recursion_threshold(params, variant)
        for factor in (1.0, 10.0):
            if not verify_decay(params.with_K(factor * threshold), variant, k_max)['pass']:
                violations += 1
        if not verify_decay(params.with_K(0.25 * threshold), variant, k_max)['pass']:
            control_hits += 1
    control_rate = control_hits / draws
    return {'check_name': 'decay', 'lhs': violations, 'rhs': 0, 'draws': draws, 'control_rate': control_rate,
            'wall_s': time.perf_counter() - started, 'pass': violations == 0 and control_rate >= 0.5}


def _sweep_values(lo: float, hi: float, count: int):
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


def check_exponents(gammas: Sequence[float] = (-0.5, -1.0, -2.0, -2.5), p_count: int = 12, s_count: int = 9,
                    p_max: float = 10.0) -> Dict[str, Any]:
    """Все системы показателей разрешимы на сетке (p, s, γ); воспроизведение значений при p=2, s=1/2"""
    failures = []
    solved = 0
    for gamma in gammas:
        for s in _sweep_values(0.1, 0.9, s_count):
            try:
                window = admissible_range(gamma, s)
            except InfeasibleSystemError:
                continue
            p_lo = max(window.p_lower + 0.05, 1.05)
            for p in _sweep_values(p_lo, p_max, p_count):
                systems = [solve_theta3(p, s), solve_theta67_r(p, s), solve_theta89_lq(p, s), solve_theta1011(s)]
                if window.contains(p):
                    systems.append(solve_lemma26(p, gamma, s, 'ii'))
                for solution in systems:
                    solved += 1
                    if not solution.feasible:
                        failures.append({'system_id': solution.system_id, 'p': p, 's': s, 'gamma': gamma,
                                         'violated': solution.violated})
    theta3 = solve_theta3(2, Fraction(1, 2))
    sol67 = solve_theta67_r(2, Fraction(1, 2))
    sol89 = solve_theta89_lq(2, Fraction(1, 2), sol67=sol67)
    worked = {
        'theta3': float(theta3['theta3']), 'alpha1': float(theta3['alpha1']), 'theta7': float(sol67['theta7']),
        'r': float(sol67['r']), 'alpha3': float(sol89['q_upper']),
    }
    exact_ok = abs(worked['theta3'] - 0.75) <= 1e-12 and abs(worked['alpha1'] - 3.0) <= 1e-12 \
        and abs(worked['theta7'] - 2.0 / 3.0) <= 1e-12
    rounded_ok = abs(worked['r'] - WORKED_VALUES['r']) <= 5e-5 and abs(worked['alpha3'] - WORKED_VALUES['alpha3']) <= 5e-5
    return {'check_name': 'exponents', 'lhs': len(failures), 'rhs': 0, 'solved': solved, 'failures': failures[:20],
            'worked_values': worked, 'worked_values_ok': exact_ok and rounded_ok,
            'pass': not failures and exact_ok and rounded_ok}


def check_generation(n: int = 8, radius: float = 6.0, widths: Sequence[float] = (1.2, 0.9, 0.7), gamma: float = -1.0,
                     s: float = 0.6, p: float = 2.0, T: float = 0.2, t_star: float = 0.2, n_theta: int = 8,
                     n_phi: int = 4, eps_theta: float = 0.1, ratio: float = 2.0) -> Dict[str, Any]:
    """Семейство обостряющихся горбов: конечные C_fit в пределах ratio друг от друга и наклон не круче -α1-0.2"""
    grid = make_grid(n, radius)
    members = []
    for width in widths:
        config = ExperimentConfig(
            kernel=_kernel(grid, gamma, s, eps_theta), n=n, radius=radius,
            initial={'kind': 'bump', 'center': (0.0, 0.0, 0.0), 'width': width, 'mass': 1.0},
            p_list=(p,), t_star=t_star, T=T, n_theta=n_theta, n_phi=n_phi, name=f'bump_{width:g}',
        )
        report = run_lp_generation(config, p)
        members.append({'width': width, 'C_fit': report['fitted_constant'], 'slope': report.get('slope'),
                        'pass': report['pass']})
    constants = [m['C_fit'] for m in members]
    spread = max(constants) / min(constants) if min(constants) > 0 else math.inf
    return {'check_name': 'generation', 'lhs': spread, 'rhs': ratio, 'members': members,
            'pass': all(m['pass'] for m in members) and spread <= ratio}


def check_degiorgi_soundness(n: int = 8, radius: float = 6.0, gamma: float = -1.0, s: float = 0.5,
                             t_star: float = 0.25, n_snapshots: int = 40, k_max: int = 40,
                             rtol: float = 0.05) -> Dict[str, Any]:
    """Стационарный максвеллиан: K_star >= sup M - 1e-6 и в пределах rtol от sup M"""
    grid = make_grid(n, radius)
    m = maxwellian(grid)
    kp = _kernel(grid, gamma, s, 0.05)
    times = np.unique(np.concatenate([np.linspace(0.0, t_star, n_snapshots + 1), window_times(kp, t_star, k_max)]))
    snapshots = [m.with_time(float(t)) for t in times]
    k_star, diagnostics = estimate_linfty(snapshots, 2.0, kp,
                                          SearchConfig(k_max=k_max, t_star=t_star))
    sup_m = float(m.values.max())
    close = abs(k_star / sup_m - 1.0) <= rtol
    return {'check_name': 'degiorgi_soundness', 'lhs': sup_m, 'rhs': k_star, 'K_star': k_star,
            'sound': diagnostics['pass'], 'pass': diagnostics['pass'] and close}


def check_ode(draws: int = 50, seed: int = 0) -> Dict[str, Any]:
    """Суперрешение X* мажорирует численное X на (t0, T] для случайных (C, θ, T)"""
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(draws):
        alpha, C = rng.uniform(0.5, 2.0), rng.uniform(0.0, 2.0)
        theta, T = rng.uniform(0.5, 0.9), rng.uniform(0.5, 2.0)
        report = ode_comparison_check(alpha, C, theta, T, x0=1e4)
        if not report['pass']:
            failures.append({'alpha': alpha, 'C': C, 'theta': theta, 'T': T,
                             'message': report.get('message', 'envelope violated')})
    return {'check_name': 'ode', 'lhs': len(failures), 'rhs': 0, 'draws': draws, 'failures': failures,
            'pass': not failures}


def check_fast_path(n_list: Sequence[int] = (12, 16), radius: float = 6.0, rel_tol: float = 1e-3,
                    min_speedup: float = 20.0, csv_path=None) -> Dict[str, Any]:
    """q_fast против q_direct: расхождение на первой сетке и ускорение на последней"""
    frame = benchmark_fast_path(n_list, radius=radius, csv_path=csv_path)
    first, last = frame.iloc[0], frame.iloc[-1]
    return {'check_name': 'fast_path', 'lhs': float(first['rel_l2']), 'rhs': rel_tol,
            'speedup': float(last['speedup']), 'rows': frame.to_dict(orient='records'),
            'pass': float(first['rel_l2']) <= rel_tol and float(last['speedup']) >= min_speedup}


def check_landau(gamma: float = -2.9, s: float = 0.95) -> Dict[str, Any]:
    return check_landau_consistency(gamma, s)


def check_hardy(n: int = 8, radius: float = 6.0, ell: float = 0.5, seed: int = 0) -> Dict[str, Any]:
    """Отношение Харди ограничено под растяжениями для возмущённого максвеллиана"""
    grid = make_grid(n, radius)
    rng = np.random.default_rng(seed)
    vx, _, _ = grid.mesh()
    field = Distribution(grid, maxwellian(grid).values * (1.0 + rng.uniform(-0.5, 0.5) * np.sin(vx)))
    report = dilation_sweep(hardy_check, field, ell=ell)
    return {'check_name': 'hardy', 'lhs': report['spread'], 'rhs': 10.0, **report}


def check_hls(n: int = 8, radius: float = 6.0, alpha: float = 1.0, p_in: float = 1.5) -> Dict[str, Any]:
    grid = make_grid(n, radius)
    report = dilation_sweep(hls_check, maxwellian(grid), alpha=alpha, p_in=p_in)
    return {'check_name': 'hls', 'lhs': report['spread'], 'rhs': 10.0, **report}


def check_embedding(n: int = 8, radius: float = 6.0, p: float = 2.0, s: float = 0.5,
                    gamma: float = -1.0) -> Dict[str, Any]:
    grid = make_grid(n, radius)
    report = dilation_sweep(sobolev_embedding_check, maxwellian(grid), p=p, s_ord=s, gamma=gamma)
    return {'check_name': 'embedding', 'lhs': report['spread'], 'rhs': 10.0, **report}


CHECKS: Dict[str, Callable[..., Dict[str, Any]]] = {
    'equilibrium': check_equilibrium,
    'conservation': check_conservation,
    'weak_form_triangle': check_weak_form_triangle,
    'lemma21': check_lemma21,
    'coercivity': check_coercivity,
    'inhomog': check_inhomog,
    'decay': check_decay,
    'exponents': check_exponents,
    'generation': check_generation,
    'degiorgi_soundness': check_degiorgi_soundness,
    'ode': check_ode,
    'fast_path': check_fast_path,
    'landau': check_landau,
    'hardy': check_hardy,
    'hls': check_hls,
    'embedding': check_embedding,
}


def run_check(name: str, **params) -> Dict[str, Any]:
    """Запуск именованной проверки; параметры командной строки передаются как есть"""
    if name not in CHECKS:
        raise ConfigError(f"Неизвестная проверка {name}; доступны: {', '.join(sorted(CHECKS))}")
    logger.info(f"Проверка {name}: {params}")
    return CHECKS[name](**params)
