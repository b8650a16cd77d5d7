# modules/analysis_params.py
import math
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Dict, Any, List, Optional, Tuple

from modules.errors import InfeasibleSystemError, KernelParamsError
from modules.kernel_grid import MODERATELY_SOFT, VERY_SOFT

logger = logging.getLogger(__name__)

MARGIN_TOL = 1e-12

SYSTEM_IDS = (
    'theta3', 'lemma26ii', 'lemma26iii', 'theta4', 'theta5',
    'theta67r', 'theta89lq', 'theta1011', 'alphas', 'K_threshold',
)


@dataclass
class ExponentSolution:
    """
    Решение системы ограничений на показатели

    margins: запас по каждому ограничению (положителен, если ограничение выполнено)
    """
    system_id: str
    values: Dict[str, Any]
    feasible: bool
    margins: Dict[str, Any] = field(default_factory=dict)
    non_strict: Tuple[str, ...] = ()

    @property
    def violated(self) -> List[str]:
        return [name for name, margin in self.margins.items()
                if not _satisfied(margin, name not in self.non_strict)]

    def __getitem__(self, key):
        return self.values[key]

    def require(self) -> 'ExponentSolution':
        if not self.feasible:
            raise InfeasibleSystemError(f"{self.system_id}: нарушены ограничения {self.violated}", self.margins)
        return self

    def as_lines(self) -> List[str]:
        lines = [f"system_id={self.system_id}", f"feasible={str(self.feasible).lower()}"]
        lines += [f"{key}={_fmt(value)}" for key, value in self.values.items()]
        lines += [f"margin.{key}={_fmt(value)}" for key, value in self.margins.items()]
        return lines


@dataclass(frozen=True)
class AdmissibleRange:
    gamma: float
    s: float
    p_lower: float
    p_upper_lemma: float
    regime: str

    def contains(self, p) -> bool:
        return self.p_lower < p < self.p_upper_lemma


def _fmt(value) -> str:
    if isinstance(value, Fraction):
        return f"{value} ({float(value):.12g})"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _satisfied(margin, strict: bool = True) -> bool:
    if isinstance(margin, Fraction):
        return margin > 0 if strict else margin >= 0
    return float(margin) >= MARGIN_TOL if strict else float(margin) >= -MARGIN_TOL


def _solution(system_id: str, values: Dict[str, Any], margins: Dict[str, Any],
              non_strict: Tuple[str, ...] = ()) -> ExponentSolution:
    feasible = all(_satisfied(m, name not in non_strict) for name, m in margins.items())
    solution = ExponentSolution(system_id, values, feasible, margins, tuple(non_strict))
    if not feasible:
        logger.debug(f"{system_id}: нарушены {solution.violated}")
    return solution


def _exact(*args):
    """Fraction, если все входы рациональны (int/Fraction), иначе float"""
    if all(isinstance(a, Rational) and not isinstance(a, bool) for a in args):
        return tuple(Fraction(a) for a in args)
    return tuple(float(a) for a in args)


def _const(value: str, like):
    return Fraction(value) if isinstance(like, Fraction) else float(Fraction(value))


def sobolev_index(p, s):
    """p_s = 3p / (3 - 2s)"""
    return 3 * p / (3 - 2 * s)


def _theta_from_holder(inv_pq, p_s):
    """θ из 1/(pq) = θ + (1-θ)/p_s"""
    return (inv_pq - 1 / p_s) / (1 - 1 / p_s)


def _check_s(s):
    if not 0 < s < 1:
        raise KernelParamsError(f"s={s} вне (0, 1)")


def solve_theta3(p, s) -> ExponentSolution:
    """1/p = (1-θ3) + θ3/p_s, α1 = θ3/(1-θ3)"""
    p, s = _exact(p, s)
    _check_s(s)
    if p <= 1:
        raise InfeasibleSystemError(f"p={p}: θ3 = 0, система вырождена", {'p_minus_1': p - 1})
    p_s = sobolev_index(p, s)
    theta3 = (1 - 1 / p) / (1 - 1 / p_s)
    margins = {'theta3_positive': theta3, 'theta3_below_1': 1 - theta3}
    alpha1 = theta3 / (1 - theta3) if theta3 != 1 else math.inf
    return _solution('theta3', {'p': p, 's': s, 'p_s': p_s, 'theta3': theta3, 'alpha1': alpha1}, margins)


def admissible_range(gamma, s) -> AdmissibleRange:
    """p_lower = 3/(3+γ+2s), p_upper = 3/(3+γ)"""
    gamma, s = _exact(gamma, s)
    if not -3 < gamma < 0:
        raise KernelParamsError(f"gamma={gamma} вне (-3, 0)")
    _check_s(s)
    denominator = 3 + gamma + 2 * s
    if denominator <= 0:
        raise InfeasibleSystemError(f"3 + γ + 2s = {denominator} <= 0: допустимых p нет",
                                    {'three_plus_gamma_plus_2s': denominator})
    regime = MODERATELY_SOFT if gamma > -2 * s else VERY_SOFT
    return AdmissibleRange(gamma, s, 3 / denominator, 3 / (3 + gamma), regime)


def _holder_q(p, gamma):
    """q из 1/q = 2 + γ/3 - 1/p"""
    inv_q = 2 + gamma / 3 - 1 / p
    return (1 / inv_q) if inv_q > 0 else math.inf, inv_q


def solve_lemma26(p, gamma, s, variant: str = 'ii', p0=None) -> ExponentSolution:
    """
    Показатели оценки I_p через L^1_w и H^s

    variant ii: 1/q = 2 + γ/3 - 1/p, 1/(pq) = θ1 + (1-θ1)/p_s, p в окне (p_lower, p_upper);
    variant iii: q0 по p0 из окна, θ2 из 1/(p q0) = θ2 + (1-θ2)/p_s, p > p_lower.
    """
    if variant not in ('ii', 'iii'):
        raise InfeasibleSystemError(f"Неизвестный вариант {variant}")
    if variant == 'iii' and p0 is None:
        raise InfeasibleSystemError("Вариант iii требует p0")
    if variant == 'ii':
        p, gamma, s = _exact(p, gamma, s)
    else:
        p, gamma, s, p0 = _exact(p, gamma, s, p0)
    window = admissible_range(gamma, s)
    p_s = sobolev_index(p, s)
    margins = {}
    if variant == 'ii':
        margins['p_above_lower'] = p - window.p_lower
        margins['p_below_upper'] = window.p_upper_lemma - p
        q, inv_q = _holder_q(p, gamma)
        names = ('q', 'theta1')
    else:
        margins['p0_above_lower'] = p0 - window.p_lower
        margins['p0_below_upper'] = window.p_upper_lemma - p0
        margins['p_above_lower'] = p - window.p_lower
        q, inv_q = _holder_q(p0, gamma)
        names = ('q0', 'theta2')
    values = {'p': p, 'gamma': gamma, 's': s, 'p_s': p_s}
    if p0 is not None:
        values['p0'] = p0
    margins['inv_q_positive'] = inv_q
    if inv_q > 0:
        pq = p * q
        theta = _theta_from_holder(1 / pq, p_s)
        values.update({names[0]: q, 'pq': pq, names[1]: theta})
        margins.update({
            'q_above_1': q - 1,
            'pq_above_1': pq - 1,
            'pq_below_p_s': p_s - pq,
            'theta_positive': theta,
            'theta_below_1': 1 - theta,
        })
    return _solution('lemma26' + variant, values, margins)


def solve_theta4(p0, gamma, s) -> ExponentSolution:
    """1/(p0 q0) = θ4 + (1-θ4)/p_s с p_s = 3p0/(3-2s); проверяется 1/θ4 > p0"""
    base = solve_lemma26(p0, gamma, s, 'ii')
    values = dict(base.values)
    margins = dict(base.margins)
    values['q0'] = values.pop('q', None)
    theta4 = values.pop('theta1', None)
    values['theta4'] = theta4
    if theta4 is not None and theta4 > 0:
        values['inv_theta4'] = 1 / theta4
        margins['inv_theta4_above_p0'] = 1 / theta4 - values['p']
    return _solution('theta4', values, margins)


def solve_theta5(p, p0, gamma, s) -> ExponentSolution:
    """1/(p q0) = θ5 + (1-θ5)/p_s, q0 из p0"""
    base = solve_lemma26(p, gamma, s, 'iii', p0=p0)
    values = dict(base.values)
    if 'theta2' in values:
        values['theta5'] = values.pop('theta2')
    return _solution('theta5', values, dict(base.margins))


def _theta67_margins(p, p_s, theta6, theta7, r):
    tail = p_s * (1 - theta6 - theta7)
    return {
        'theta6_positive': theta6,
        'theta6_below_1': 1 - theta6,
        'theta7_positive': theta7,
        'theta7_below_1': 1 - theta7,
        'sum_below_1': 1 - theta6 - theta7,
        'tail_below_p': p - tail,
        'mixed_above_p': p * theta7 + tail - p,
        'r_above_p': r - p,
        'r_below_p_s': p_s - r,
    }


def default_theta6(s):
    """θ6 близко к нулю: min(0.01, половина верхней границы s(3-2s)/9)"""
    return min(_const('0.01', s), s * (3 - 2 * s) / 18)


def solve_theta67_r(p, s, theta6_hint=None, theta7_hint=None) -> ExponentSolution:
    """
    θ6, θ7 и r = θ6 + pθ7 + p_s(1-θ6-θ7)

    По умолчанию θ7 = 1 - p/(2p_s), θ6 = default_theta6(s).
    """
    p, s = _exact(p, s)
    _check_s(s)
    if p <= 1:
        raise InfeasibleSystemError(f"p={p} должно быть > 1", {'p_minus_1': p - 1})
    p_s = sobolev_index(p, s)
    theta7 = 1 - p / (2 * p_s) if theta7_hint is None else _exact(theta7_hint, p)[0]
    theta6 = default_theta6(s) if theta6_hint is None else _exact(theta6_hint, p)[0]
    r = theta6 + p * theta7 + p_s * (1 - theta6 - theta7)
    values = {'p': p, 's': s, 'p_s': p_s, 'theta6': theta6, 'theta7': theta7, 'r': r}
    return _solution('theta67r', values, _theta67_margins(p, p_s, theta6, theta7, r))


def solve_theta89_lq(p, s, q=None, theta8_hint=None, theta9_hint=None,
                     sol67: Optional[ExponentSolution] = None) -> ExponentSolution:
    """
    θ8, θ9, q, ℓ с ℓq = θ8 + pθ9 + p_s(1-θ8-θ9), ℓ > p

    По умолчанию (θ8, θ9) = (θ6, θ7) и q = 1 + min(0.05, (α3 - 1)/2): условие
    pθ9 + p_s(1-θ8-θ9) > pq ограничивает q сверху числом (r - θ8)/p = α3.
    """
    p, s = _exact(p, s)
    sol67 = sol67 or solve_theta67_r(p, s)
    theta8 = sol67['theta6'] if theta8_hint is None else _exact(theta8_hint, p)[0]
    theta9 = sol67['theta7'] if theta9_hint is None else _exact(theta9_hint, p)[0]
    p_s = sobolev_index(p, s)
    tail = p_s * (1 - theta8 - theta9)
    r89 = theta8 + p * theta9 + tail
    q_upper = (r89 - theta8) / p
    if q is None:
        q = 1 + min(_const('0.05', p), (q_upper - 1) / 2)
    else:
        q = _exact(q, p)[0]
    ell = r89 / q
    margins = {
        'theta8_positive': theta8,
        'theta8_below_1': 1 - theta8,
        'theta9_positive': theta9,
        'theta9_below_1': 1 - theta9,
        'sum_below_1': 1 - theta8 - theta9,
        'tail_below_pq': p * q - tail,
        'mixed_above_pq': p * theta9 + tail - p * q,
        'q_above_1': q - 1,
        'ell_above_p': ell - p,
    }
    values = {'p': p, 's': s, 'p_s': p_s, 'theta8': theta8, 'theta9': theta9, 'q': q, 'ell': ell,
              'ell_q': r89, 'q_upper': q_upper}
    return _solution('theta89lq', values, margins)


def solve_theta1011(s, theta10_hint=None, theta11_hint=None) -> ExponentSolution:
    """
    1 + α = θ10 + 2θ11 + 6/(3-2s)(1-θ10-θ11), α > 1

    По умолчанию θ11 = 2s/3, θ10 - не больше половины обеих верхних границ
    (2s(3-2s)/9 и 4s(3-2s)/(3(3+2s))) и не больше 0.01.
    """
    (s,) = _exact(s)
    _check_s(s)
    c = 3 / (3 - 2 * s)
    theta11 = 2 * s / 3 if theta11_hint is None else _exact(theta11_hint, s)[0]
    if theta10_hint is None:
        bound_a = 2 * s * (3 - 2 * s) / 9
        bound_b = 4 * s * (3 - 2 * s) / (3 * (3 + 2 * s))
        theta10 = min(_const('0.01', s), min(bound_a, bound_b) / 2)
    else:
        theta10 = _exact(theta10_hint, s)[0]
    rest = 1 - theta10 - theta11
    alpha = theta10 + 2 * theta11 + 2 * c * rest - 1
    margins = {
        'theta10_positive': theta10,
        'theta10_below_1': 1 - theta10,
        'theta11_positive': theta11,
        'theta11_below_1': 1 - theta11,
        'sum_below_1': rest,
        'mixed_above_1': theta11 + c * rest - 1,
        'tail_at_most_1': 1 - c * rest,
        'alpha_above_1': alpha - 1,
    }
    values = {'s': s, 'theta10': theta10, 'theta11': theta11, 'alpha': alpha}
    return _solution('theta1011', values, margins, non_strict=('tail_at_most_1',))


def derive_degiorgi_exponents(p, s, sol67: ExponentSolution, sol89: ExponentSolution,
                              W0: float, C: float = 1.0) -> ExponentSolution:
    """
    α3, α4, a, b и порог K = R0^{1/b} для рекурсии W_k <= C 2^{ak} K^{-b}(W^{α3} + W^{α4})
    """
    if not sol67.feasible or not sol89.feasible:
        raise InfeasibleSystemError("Входные системы θ6-θ9 несовместны",
                                    {**sol67.margins, **sol89.margins})
    if not W0 > 0:
        raise InfeasibleSystemError(f"W0={W0} должно быть положительным")
    p, s = (float(v) for v in (p, s))
    p_s = float(sobolev_index(p, s))
    theta6, theta7 = float(sol67['theta6']), float(sol67['theta7'])
    theta8, theta9 = float(sol89['theta8']), float(sol89['theta9'])
    q, ell, r = float(sol89['q']), float(sol89['ell']), float(sol67['r'])
    alpha3 = theta7 + p_s / p * (1 - theta6 - theta7)
    alpha4 = theta9 / q + p_s / (p * q) * (1 - theta8 - theta9)
    margins = {'alpha3_above_1': alpha3 - 1, 'alpha4_above_1': alpha4 - 1}
    if alpha3 <= 1 or alpha4 <= 1:
        raise InfeasibleSystemError(f"α3={alpha3:.6g}, α4={alpha4:.6g}: нужно > 1", margins)
    a = max(r - p + 1, ell - p + 1)
    shift = a * alpha3 / (alpha3 - 1)
    r0 = max(C * 2 ** (alpha4 + shift) * W0 ** (alpha3 + alpha4 - 2),
             C * 2 ** (1 + shift) * W0 ** (alpha3 - 1))
    b = min(r - p, ell - p) if r0 > 1 else max(r - p, ell - p)
    values = {
        'alpha3': alpha3, 'alpha4': alpha4, 'a': a, 'b': b, 'R0': r0,
        'K_threshold': r0 ** (1.0 / b), 'C': C, 'W0': W0,
    }
    margins['b_positive'] = b
    return _solution('K_threshold', values, margins)


def compose_alpha6(alpha5: float, alpha3: float, alpha4: float) -> float:
    """α6 = α5(α3 + α4 - 2)"""
    return alpha5 * (alpha3 + alpha4 - 2)


def collect_alphas(p, s, gamma=None, alpha5: Optional[float] = None, W0: float = 1.0) -> ExponentSolution:
    """Все явно вычислимые показатели α; α2, α5, α7 подбираются регрессией по прогонам"""
    theta3 = solve_theta3(p, s).require()
    sol67 = solve_theta67_r(p, s).require()
    sol89 = solve_theta89_lq(p, s, sol67=sol67).require()
    degiorgi = derive_degiorgi_exponents(p, s, sol67, sol89, W0)
    values = {
        'alpha1': theta3['alpha1'],
        'alpha3': degiorgi['alpha3'],
        'alpha4': degiorgi['alpha4'],
        'alpha': solve_theta1011(s).require()['alpha'],
    }
    if alpha5 is not None:
        values['alpha5'] = alpha5
        values['alpha6'] = compose_alpha6(alpha5, degiorgi['alpha3'], degiorgi['alpha4'])
    margins = {'alpha1_positive': float(theta3['alpha1']), **degiorgi.margins}
    if gamma is not None:
        values['regime'] = admissible_range(gamma, s).regime
    return _solution('alphas', values, margins)


def check_landau_consistency(gamma, s) -> Dict[str, Any]:
    """p_lower при (γ, s) -> (-3, 1) стремится к 3/2"""
    p_lower = 3.0 / (3.0 + float(gamma) + 2.0 * float(s))
    eps = 1e-6
    limit = 3.0 / (3.0 + (-3.0 + eps) + 2.0 * (1.0 - eps))
    return {
        'check_name': 'landau_consistency',
        'gamma': float(gamma), 's': float(s),
        'p_lower': p_lower,
        'landau_limit': limit,
        'lhs': limit, 'rhs': 1.5,
        'pass': abs(limit - 1.5) < 1e-5,
    }


def solve(system_id: str, **kwargs) -> ExponentSolution:
    """Диспетчер по идентификатору системы (для командной строки)"""
    handlers = {
        'theta3': lambda: solve_theta3(kwargs['p'], kwargs['s']),
        'lemma26ii': lambda: solve_lemma26(kwargs['p'], kwargs['gamma'], kwargs['s'], 'ii'),
        'lemma26iii': lambda: solve_lemma26(kwargs['p'], kwargs['gamma'], kwargs['s'], 'iii', kwargs['p0']),
        'theta4': lambda: solve_theta4(kwargs['p0'], kwargs['gamma'], kwargs['s']),
        'theta5': lambda: solve_theta5(kwargs['p'], kwargs['p0'], kwargs['gamma'], kwargs['s']),
        'theta67r': lambda: solve_theta67_r(kwargs['p'], kwargs['s'], kwargs.get('theta6'), kwargs.get('theta7')),
        'theta89lq': lambda: solve_theta89_lq(kwargs['p'], kwargs['s'], kwargs.get('q'),
                                              kwargs.get('theta8'), kwargs.get('theta9')),
        'theta1011': lambda: solve_theta1011(kwargs['s'], kwargs.get('theta10'), kwargs.get('theta11')),
        'alphas': lambda: collect_alphas(kwargs['p'], kwargs['s'], kwargs.get('gamma'), kwargs.get('alpha5'),
                                         kwargs.get('W0') or 1.0),
        'K_threshold': lambda: _k_threshold(kwargs),
    }
    if system_id not in handlers:
        raise InfeasibleSystemError(f"Неизвестная система {system_id}; доступны: {', '.join(SYSTEM_IDS)}")
    try:
        return handlers[system_id]()
    except KeyError as e:
        raise InfeasibleSystemError(f"{system_id}: не задан параметр {e}")


def _k_threshold(kwargs) -> ExponentSolution:
    p, s = kwargs['p'], kwargs['s']
    sol67 = solve_theta67_r(p, s)
    sol89 = solve_theta89_lq(p, s, kwargs.get('q'), sol67=sol67)
    return derive_degiorgi_exponents(p, s, sol67, sol89, kwargs.get('W0') or 1.0, kwargs.get('C') or 1.0)
