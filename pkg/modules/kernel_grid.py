# modules/kernel_grid.py
import io
import math
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, Dict, Any

import numpy as np
import pandas as pd
from scipy import integrate

from modules.errors import GridError, KernelParamsError

logger = logging.getLogger(__name__)

MODERATELY_SOFT = 'moderately_soft'
VERY_SOFT = 'very_soft'

_HEADER_INT = np.dtype('<i8')
_HEADER_FLOAT = np.dtype('<f8')
HEADER_BYTES = 3 * 8


@dataclass(frozen=True)
class KernelParams:
    """
    Параметры ядра B(v-v*, σ) = Φ(|v-v*|) b(cos θ)

    Args:
        gamma: показатель мягкого потенциала, (-3, 0)
        s: порядок угловой сингулярности, (0, 1)
        b0: амплитуда угловой части
        eps_theta: угловое обрезание (радианы)
        delta_rel: длина сглаживания Φ по относительной скорости
    """
    gamma: float
    s: float
    b0: float = 1.0
    eps_theta: float = 0.05
    delta_rel: float = 0.0

    def __post_init__(self):
        if not -3.0 < self.gamma < 0.0:
            raise KernelParamsError(f"gamma={self.gamma} вне (-3, 0)")
        if not 0.0 < self.s < 1.0:
            raise KernelParamsError(f"s={self.s} вне (0, 1)")
        if not self.b0 > 0.0:
            raise KernelParamsError(f"b0={self.b0} должно быть положительным")
        if not 0.0 < self.eps_theta < math.pi / 2:
            raise KernelParamsError(f"eps_theta={self.eps_theta} вне (0, π/2)")
        if not self.delta_rel >= 0.0:
            raise KernelParamsError(f"delta_rel={self.delta_rel} отрицательно")

    @property
    def regime(self) -> str:
        return MODERATELY_SOFT if self.gamma > -2.0 * self.s else VERY_SOFT

    def with_delta(self, delta_rel: float) -> 'KernelParams':
        return KernelParams(self.gamma, self.s, self.b0, self.eps_theta, float(delta_rel))

    def with_eps(self, eps_theta: float) -> 'KernelParams':
        return KernelParams(self.gamma, self.s, self.b0, float(eps_theta), self.delta_rel)

    def as_dict(self) -> Dict[str, Any]:
        return {
            'gamma': self.gamma, 's': self.s, 'b0': self.b0,
            'eps_theta': self.eps_theta, 'delta_rel': self.delta_rel,
            'regime': self.regime,
        }


@dataclass(frozen=True)
class VelocityGrid:
    """Равномерная сетка центров ячеек на кубе [-R, R]^3"""
    n: int
    radius: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4 or self.n % 2:
            raise GridError(f"n={self.n}: нужно чётное целое n >= 4")
        if not self.radius > 0.0:
            raise GridError(f"radius={self.radius} должен быть положительным")

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def coords(self) -> np.ndarray:
        # (i + 1/2 - n/2) h: отражение i -> n-1-i меняет знак точно
        return (np.arange(self.n) + 0.5 - self.n // 2) * self.spacing

    @property
    def shape(self):
        return (self.n, self.n, self.n)

    @property
    def size(self) -> int:
        return self.n ** 3

    def mesh(self):
        x = self.coords
        return np.meshgrid(x, x, x, indexing='ij')

    def speed_sq(self) -> np.ndarray:
        vx, vy, vz = self.mesh()
        return vx * vx + vy * vy + vz * vz

    def bracket(self) -> np.ndarray:
        """⟨v⟩ = sqrt(1 + |v|^2) в узлах"""
        return np.sqrt(1.0 + self.speed_sq())

    def node_coordinate(self, i: int) -> float:
        return float(self.coords[i])

    def grid_hash(self) -> str:
        return hashlib.sha1(f"{self.n}:{self.radius!r}".encode()).hexdigest()[:12]

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)


def make_grid(n: int, radius: float) -> VelocityGrid:
    """Создаёт сетку: шаг h = 2R/n, узел i имеет координату -R + (i + 1/2) h"""
    return VelocityGrid(int(n) if float(n).is_integer() else n, float(radius))


@dataclass(frozen=True, eq=False)
class Distribution:
    """
    Неотрицательная функция f(v) на сетке

    values[ix, iy, iz]; отрицательные значения допустимы только вместе с
    отчётом о нарушении положительности (positivity_report)
    """
    grid: VelocityGrid
    values: np.ndarray
    time_tag: Optional[float] = None
    positivity_report: Optional[Dict[str, float]] = field(default=None, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != self.grid.shape:
            raise GridError(f"Форма {values.shape} не совпадает с сеткой {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise GridError("Значения распределения должны быть конечными")
        if self.positivity_report is None and np.any(values < 0.0):
            raise GridError(f"Отрицательные значения: min={values.min():.3e}")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def h(self) -> float:
        return self.grid.spacing

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def scaled(self, c: float) -> 'Distribution':
        return Distribution(self.grid, c * self.values, self.time_tag)

    def with_values(self, values, time_tag=None, positivity_report=None) -> 'Distribution':
        return Distribution(
            self.grid, values,
            self.time_tag if time_tag is None else time_tag,
            positivity_report,
        )

    def with_time(self, time_tag: float) -> 'Distribution':
        return Distribution(self.grid, self.values, float(time_tag), self.positivity_report)

    def same_grid(self, other: 'Distribution') -> bool:
        return self.grid == other.grid

    # Сериализация

    def to_bytes(self) -> bytes:
        header = np.array([self.grid.n], dtype=_HEADER_INT).tobytes()
        tag = np.nan if self.time_tag is None else self.time_tag
        header += np.array([self.grid.radius, tag], dtype=_HEADER_FLOAT).tobytes()
        # x меняется быстрее всех
        body = np.asarray(self.values.ravel(order='F'), dtype='<f8').tobytes()
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> 'Distribution':
        if len(data) < HEADER_BYTES:
            raise GridError("Слишком короткий бинарный файл распределения")
        n = int(np.frombuffer(data, dtype=_HEADER_INT, count=1)[0])
        radius, tag = np.frombuffer(data, dtype=_HEADER_FLOAT, count=2, offset=8)
        grid = make_grid(n, float(radius))
        body = np.frombuffer(data, dtype='<f8', offset=HEADER_BYTES)
        if body.size != grid.size:
            raise GridError(f"Ожидалось {grid.size} значений, прочитано {body.size}")
        values = body.reshape(grid.shape, order='F')
        time_tag = None if np.isnan(tag) else float(tag)
        report = {'loaded_negative_mass': float(-values[values < 0].sum())} if np.any(values < 0) else None
        return cls(grid, values, time_tag, report)

    def save_binary(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load_binary(cls, path: Union[str, Path]) -> 'Distribution':
        return cls.from_bytes(Path(path).read_bytes())

    def to_frame(self) -> pd.DataFrame:
        vx, vy, vz = self.grid.mesh()
        return pd.DataFrame({
            'vx': vx.ravel(order='F'),
            'vy': vy.ravel(order='F'),
            'vz': vz.ravel(order='F'),
            'f': self.values.ravel(order='F'),
        })

    def to_csv(self, path_or_buffer=None):
        return self.to_frame().to_csv(path_or_buffer, index=False)

    @classmethod
    def from_csv(cls, path_or_buffer, radius: Optional[float] = None, time_tag=None) -> 'Distribution':
        if isinstance(path_or_buffer, str) and '\n' in path_or_buffer:
            path_or_buffer = io.StringIO(path_or_buffer)
        frame = pd.read_csv(path_or_buffer)
        missing = {'vx', 'vy', 'vz', 'f'} - set(frame.columns)
        if missing:
            raise GridError(f"В CSV нет колонок: {sorted(missing)}")
        n = round(len(frame) ** (1.0 / 3.0))
        if n ** 3 != len(frame):
            raise GridError(f"{len(frame)} строк не образуют куб")
        if radius is None:
            h = float(frame['vx'].iloc[1] - frame['vx'].iloc[0])
            radius = n * h / 2.0
        grid = make_grid(n, radius)
        values = frame['f'].to_numpy().reshape(grid.shape, order='F')
        return cls(grid, values, time_tag)


@dataclass(frozen=True)
class ClassUParams:
    d0: float
    e0: float
    w: float = 5.0

    def __post_init__(self):
        if not self.d0 > 0.0:
            raise KernelParamsError(f"d0={self.d0} должно быть положительным")
        # e0 = 0 - пустой класс: любая f с положительной массой его не проходит
        if self.e0 < 0.0:
            raise KernelParamsError(f"e0={self.e0} отрицательно")
        if self.w < 0.0:
            raise KernelParamsError(f"w={self.w} отрицательно")


@dataclass(frozen=True)
class ClassUReport:
    mass: float
    entropy_energy: float
    mass_ok: bool
    energy_ok: bool

    @property
    def passed(self) -> bool:
        return self.mass_ok and self.energy_ok

    def as_dict(self) -> Dict[str, Any]:
        return {
            'check_name': 'class_u', 'mass': self.mass,
            'entropy_energy': self.entropy_energy, 'pass': self.passed,
        }


def phi(r, params: KernelParams):
    """
    Кинетическая часть ядра Φ(r) = (r^2 + δ^2)^{γ/2}

    При δ = 0 и r = 0 возвращается +inf (сингулярное значение)
    """
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0.0):
        raise KernelParamsError("r должно быть неотрицательным")
    base = r_arr * r_arr + params.delta_rel ** 2
    with np.errstate(divide='ignore'):
        out = np.where(base > 0.0, np.power(np.where(base > 0.0, base, 1.0), 0.5 * params.gamma), np.inf)
    if np.ndim(r) == 0:
        return float(out)
    return out


def phi_is_singular(r, params: KernelParams) -> bool:
    return params.delta_rel == 0.0 and float(r) == 0.0


def b_angular(cos_theta, params: KernelParams):
    """
    Угловая часть b(cos θ) = b0 θ^{-(1+2s)} / sin θ на [eps, π/2]

    Ноль при θ > π/2, постоянна (значение в eps) на (0, eps)
    """
    c = np.asarray(cos_theta, dtype=float)
    if np.any(np.abs(c) > 1.0 + 1e-12):
        raise KernelParamsError("cos_theta вне [-1, 1]")
    theta = np.arccos(np.clip(c, -1.0, 1.0))
    theta_eff = np.maximum(theta, params.eps_theta)
    value = params.b0 * theta_eff ** (-(1.0 + 2.0 * params.s)) / np.sin(theta_eff)
    out = np.where(theta > np.pi / 2, 0.0, value)
    if np.ndim(cos_theta) == 0:
        return float(out)
    return out


def angular_integral(params: KernelParams, include_plateau: bool = True) -> float:
    """∫_{S^2} b dσ квадратурой по θ (для исследования расходимости при eps -> 0)"""
    eps = params.eps_theta

    # в переменной x = log θ подынтегральное выражение гладкое
    def integrand(x):
        theta = math.exp(x)
        return 2.0 * math.pi * params.b0 * theta ** (-(1.0 + 2.0 * params.s)) * theta

    body, _ = integrate.quad(integrand, math.log(eps), math.log(math.pi / 2), limit=200, epsabs=0.0, epsrel=1e-12)
    if not include_plateau:
        return body
    plateau = 2.0 * math.pi * b_angular(math.cos(eps), params) * (1.0 - math.cos(eps))
    return body + plateau


def from_inverse_power_law(ell_pow: float, b0: float = 1.0, eps_theta: float = 0.05,
                           delta_rel: float = 0.0) -> KernelParams:
    """Потенциал r^{-ℓ}: γ = (ℓ-4)/ℓ, s = 1/ℓ"""
    if not 1.0 < ell_pow < 4.0:
        raise KernelParamsError(f"ℓ={ell_pow}: γ=(ℓ-4)/ℓ и s=1/ℓ вне допустимой области (нужно 1 < ℓ < 4)")
    return KernelParams((ell_pow - 4.0) / ell_pow, 1.0 / ell_pow, b0, eps_theta, delta_rel)


def to_inverse_power_law(params: KernelParams, rtol: float = 1e-12) -> float:
    """Обратное отображение (γ, s) -> ℓ; проверяет согласованность γ = (ℓ-4)/ℓ"""
    ell_pow = 1.0 / params.s
    if abs((ell_pow - 4.0) / ell_pow - params.gamma) > rtol * max(1.0, abs(params.gamma)):
        raise KernelParamsError(f"(γ={params.gamma}, s={params.s}) не соответствует обратному степенному закону")
    return ell_pow


def maxwellian(grid: VelocityGrid, rho: float = 1.0, u=(0.0, 0.0, 0.0), T: float = 1.0,
               time_tag: Optional[float] = None) -> Distribution:
    """Максвеллиан ρ (2πT)^{-3/2} exp(-|v-u|^2/(2T)) в узлах"""
    if not rho > 0.0:
        raise KernelParamsError(f"rho={rho} должно быть положительным")
    if not T > 0.0:
        raise KernelParamsError(f"T={T} должно быть положительным")
    ux, uy, uz = (float(c) for c in u)
    vx, vy, vz = grid.mesh()
    dist_sq = (vx - ux) ** 2 + (vy - uy) ** 2 + (vz - uz) ** 2
    values = rho * (2.0 * np.pi * T) ** (-1.5) * np.exp(-dist_sq / (2.0 * T))
    return Distribution(grid, values, time_tag)


def check_class_u(f: Distribution, params: ClassUParams) -> ClassUReport:
    """Проверка принадлежности классу U(D0, E0): масса >= D0, ∫f(1+|v|^2+log(1+f)) <= E0"""
    vol = f.grid.cell_volume
    values = f.values
    mass = float(values.sum() * vol)
    weight = 1.0 + f.grid.speed_sq() + np.log1p(np.maximum(values, 0.0))
    entropy_energy = float((values * weight).sum() * vol)
    return ClassUReport(
        mass=mass,
        entropy_energy=entropy_energy,
        mass_ok=mass >= params.d0,
        energy_ok=entropy_energy <= params.e0,
    )
