# modules/collision.py
import json
import math
import time
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Any, Optional, Tuple, Union

import numpy as np
from numba import njit, prange
from scipy.signal import fftconvolve
from scipy.special import roots_legendre, xlogy

from modules.errors import CollisionError, GridError, QuadratureError
from modules.kernel_grid import Distribution, KernelParams, VelocityGrid, b_angular, phi

logger = logging.getLogger(__name__)

DEPOSIT_ORDERS = {'trilinear': 1, 'quadratic': 2}
BOUNDARY_MODES = {'zero': 0, 'periodic': 1}
DEFAULT_CHUNKS = 64


@dataclass(frozen=True)
class AngularQuadrature:
    """
    Квадратура по сфере относительно направления v - v*

    θ = eps + (π/2 - eps) u^grading, u - узлы Гаусса-Лежандра на [0, 1];
    φ_j = 2πj/n_phi. Вес узла: sin θ dθ · 2π/n_phi.
    """
    n_theta: int = 16
    n_phi: int = 8
    grading: float = 2.0

    def __post_init__(self):
        if self.n_theta < 4 or self.n_phi < 4:
            raise QuadratureError(f"n_theta={self.n_theta}, n_phi={self.n_phi}: нужно не меньше 4")
        if self.grading < 1.0:
            raise QuadratureError(f"grading={self.grading} < 1")

    def theta_nodes(self, eps_theta: float) -> Tuple[np.ndarray, np.ndarray]:
        """Узлы θ и веса sin θ dθ"""
        u, w = roots_legendre(self.n_theta)
        u = 0.5 * (u + 1.0)
        w = 0.5 * w
        span = 0.5 * np.pi - eps_theta
        theta = eps_theta + span * u ** self.grading
        jac = span * self.grading * u ** (self.grading - 1.0)
        return theta, np.sin(theta) * jac * w

    def phi_tables(self) -> Tuple[np.ndarray, np.ndarray]:
        """cos φ_j, sin φ_j с точной симметрией φ -> -φ"""
        j = np.arange(self.n_phi)
        angles = 2.0 * np.pi * j / self.n_phi
        cphi = np.cos(angles)
        sphi = np.sin(angles)
        for k in range(1, self.n_phi):
            mirror = self.n_phi - k
            if mirror < k:
                cphi[k] = cphi[mirror]
                sphi[k] = -sphi[mirror]
        if self.n_phi % 2 == 0:
            sphi[self.n_phi // 2] = 0.0
        sphi[0] = 0.0
        return cphi, sphi

    def tables(self, kp: KernelParams) -> Dict[str, np.ndarray]:
        theta, wsin = self.theta_nodes(kp.eps_theta)
        cphi, sphi = self.phi_tables()
        b = b_angular(np.cos(theta), kp)
        return {
            'theta': theta,
            'ct': np.cos(theta),
            'st': np.sin(theta),
            'weight': wsin * (2.0 * np.pi / self.n_phi),
            'aw': b * wsin * (2.0 * np.pi / self.n_phi),
            'cphi': cphi,
            'sphi': sphi,
        }

    def cap_measure(self, kp: KernelParams) -> float:
        """Сумма весов; должна совпадать с 2π cos(eps)"""
        return float(self.tables(kp)['weight'].sum() * self.n_phi)

    def angular_mass(self, kp: KernelParams) -> float:
        """Σ b·вес = дискретный аналог ∫ b dσ по усечённой шапке"""
        return float(self.tables(kp)['aw'].sum() * self.n_phi)


@dataclass
class CollisionOutput:
    grid: VelocityGrid
    q_values: np.ndarray
    gain: Optional[np.ndarray] = None
    loss: Optional[np.ndarray] = None
    eval_stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def gain_loss_split(self):
        if self.gain is None or self.loss is None:
            return None
        return self.gain, self.loss

    def total(self) -> float:
        return float(self.q_values.sum() * self.grid.cell_volume)

    def as_distribution(self, time_tag=None) -> Distribution:
        negative = float(-self.q_values[self.q_values < 0].sum() * self.grid.cell_volume)
        return Distribution(self.grid, self.q_values, time_tag, {'signed_field': 1.0, 'negative_part': negative})

    def save(self, path: Union[str, Path]) -> Path:
        """Бинарный файл в формате распределения плюс JSON со статистикой"""
        path = Path(path)
        self.as_distribution().save_binary(path)
        sidecar = path.with_suffix('.stats.json')
        sidecar.write_text(json.dumps(self.eval_stats, indent=2, ensure_ascii=False), encoding='utf-8')
        return path


# Ядра numba

@njit(cache=True)
def _axis_stencil(xi, order, n, periodic, idx, wts):
    if order == 1:
        i0 = int(math.floor(xi))
        t = xi - i0
        m = 2
        idx[0] = i0
        idx[1] = i0 + 1
        wts[0] = 1.0 - t
        wts[1] = t
    else:
        c = int(math.floor(xi + 0.5))
        s = xi - c
        m = 3
        idx[0] = c - 1
        idx[1] = c
        idx[2] = c + 1
        wts[0] = 0.5 * s * (s - 1.0)
        wts[1] = 1.0 - s * s
        wts[2] = 0.5 * s * (s + 1.0)
    for a in range(m):
        k = idx[a]
        if k < 0 or k >= n:
            if periodic == 1:
                idx[a] = k % n
            else:
                idx[a] = -1
    return m


@njit(cache=True)
def _frame(kx, ky, kz):
    if abs(kx) > 0.9:
        ax, ay, az = 0.0, 1.0, 0.0
    else:
        ax, ay, az = 1.0, 0.0, 0.0
    cx = ky * az - kz * ay
    cy = kz * ax - kx * az
    cz = kx * ay - ky * ax
    nrm = math.sqrt(cx * cx + cy * cy + cz * cz)
    e1x, e1y, e1z = cx / nrm, cy / nrm, cz / nrm
    e2x = ky * e1z - kz * e1y
    e2y = kz * e1x - kx * e1z
    e2z = kx * e1y - ky * e1x
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(parallel=True, cache=True)
def _deposit_kernel(g, f, x, h, ct, st, aw, cphi, sphi, gamma, delta2, order, periodic, n_chunks):
    n = x.shape[0]
    total = n * n * n
    gain_parts = np.zeros((n_chunks, n, n, n))
    loss = np.zeros((n, n, n))
    leak_parts = np.zeros(n_chunks)
    evals = np.zeros(n_chunks, dtype=np.int64)
    n_th = ct.shape[0]
    n_ph = cphi.shape[0]
    x0 = x[0]
    chunk = (total + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        ix_buf = np.empty(3, np.int64)
        iy_buf = np.empty(3, np.int64)
        iz_buf = np.empty(3, np.int64)
        wx_buf = np.empty(3)
        wy_buf = np.empty(3)
        wz_buf = np.empty(3)
        start = c * chunk
        stop = min(total, start + chunk)
        for i in range(start, stop):
            ix = i % n
            iy = (i // n) % n
            iz = i // (n * n)
            fi = f[ix, iy, iz]
            if fi == 0.0:
                continue
            vx = x[ix]
            vy = x[iy]
            vz = x[iz]
            loss_i = 0.0
            for j in range(total):
                if j == i:
                    continue
                jx = j % n
                jy = (j // n) % n
                jz = j // (n * n)
                gj = g[jx, jy, jz]
                if gj == 0.0:
                    continue
                ux = vx - x[jx]
                uy = vy - x[jy]
                uz = vz - x[jz]
                r = math.sqrt(ux * ux + uy * uy + uz * uz)
                base = fi * gj * (r * r + delta2) ** (0.5 * gamma)
                kx = ux / r
                ky = uy / r
                kz = uz / r
                e1x, e1y, e1z, e2x, e2y, e2z = _frame(kx, ky, kz)
                cx = 0.5 * (vx + x[jx])
                cy = 0.5 * (vy + x[jy])
                cz = 0.5 * (vz + x[jz])
                half = 0.5 * r
                for a in range(n_th):
                    wa = base * aw[a]
                    loss_i += wa * n_ph
                    for b in range(n_ph):
                        sx = ct[a] * kx + st[a] * (cphi[b] * e1x + sphi[b] * e2x)
                        sy = ct[a] * ky + st[a] * (cphi[b] * e1y + sphi[b] * e2y)
                        sz = ct[a] * kz + st[a] * (cphi[b] * e1z + sphi[b] * e2z)
                        mx = _axis_stencil((cx + half * sx - x0) / h, order, n, periodic, ix_buf, wx_buf)
                        my = _axis_stencil((cy + half * sy - x0) / h, order, n, periodic, iy_buf, wy_buf)
                        mz = _axis_stencil((cz + half * sz - x0) / h, order, n, periodic, iz_buf, wz_buf)
                        kept = 0.0
                        for p in range(mx):
                            if ix_buf[p] < 0:
                                continue
                            for q in range(my):
                                if iy_buf[q] < 0:
                                    continue
                                wxy = wx_buf[p] * wy_buf[q]
                                for t in range(mz):
                                    if iz_buf[t] < 0:
                                        continue
                                    w = wxy * wz_buf[t]
                                    gain_parts[c, ix_buf[p], iy_buf[q], iz_buf[t]] += wa * w
                                    kept += w
                        leak_parts[c] += wa * (1.0 - kept)
                evals[c] += n_th * n_ph
            loss[ix, iy, iz] = loss_i
    gain = np.zeros((n, n, n))
    for c in range(n_chunks):
        gain += gain_parts[c]
    return gain, loss, leak_parts.sum(), evals.sum()


@njit(parallel=True, cache=True)
def _gather_kernel(g, f, xw, p, x, h, ct, st, aw, cphi, sphi, gamma, delta2, periodic):
    n = x.shape[0]
    total = n * n * n
    out = np.zeros((4, n, n, n))
    n_th = ct.shape[0]
    n_ph = cphi.shape[0]
    x0 = x[0]
    for i in prange(total):
        ix_buf = np.empty(3, np.int64)
        iy_buf = np.empty(3, np.int64)
        iz_buf = np.empty(3, np.int64)
        wx_buf = np.empty(3)
        wy_buf = np.empty(3)
        wz_buf = np.empty(3)
        ix = i % n
        iy = (i // n) % n
        iz = i // (n * n)
        fi = f[ix, iy, iz]
        xi_w = xw[ix, iy, iz]
        fp = fi ** p
        fh = fi ** (0.5 * p)
        fm = fi ** (p - 1.0)
        vx = x[ix]
        vy = x[iy]
        vz = x[iz]
        s_i = 0.0
        s_j = 0.0
        s_l = 0.0
        s_m = 0.0
        for j in range(total):
            if j == i:
                continue
            jx = j % n
            jy = (j // n) % n
            jz = j // (n * n)
            gj = g[jx, jy, jz]
            if gj == 0.0:
                continue
            ux = vx - x[jx]
            uy = vy - x[jy]
            uz = vz - x[jz]
            r = math.sqrt(ux * ux + uy * uy + uz * uz)
            base = gj * (r * r + delta2) ** (0.5 * gamma)
            kx = ux / r
            ky = uy / r
            kz = uz / r
            e1x, e1y, e1z, e2x, e2y, e2z = _frame(kx, ky, kz)
            cx = 0.5 * (vx + x[jx])
            cy = 0.5 * (vy + x[jy])
            cz = 0.5 * (vz + x[jz])
            half = 0.5 * r
            for a in range(n_th):
                wa = base * aw[a]
                for b in range(n_ph):
                    sx = ct[a] * kx + st[a] * (cphi[b] * e1x + sphi[b] * e2x)
                    sy = ct[a] * ky + st[a] * (cphi[b] * e1y + sphi[b] * e2y)
                    sz = ct[a] * kz + st[a] * (cphi[b] * e1z + sphi[b] * e2z)
                    mx = _axis_stencil((cx + half * sx - x0) / h, 1, n, periodic, ix_buf, wx_buf)
                    my = _axis_stencil((cy + half * sy - x0) / h, 1, n, periodic, iy_buf, wy_buf)
                    mz = _axis_stencil((cz + half * sz - x0) / h, 1, n, periodic, iz_buf, wz_buf)
                    y = 0.0
                    for pp in range(mx):
                        if ix_buf[pp] < 0:
                            continue
                        for q in range(my):
                            if iy_buf[q] < 0:
                                continue
                            wxy = wx_buf[pp] * wy_buf[q]
                            for t in range(mz):
                                if iz_buf[t] < 0:
                                    continue
                                y += wxy * wz_buf[t] * f[ix_buf[pp], iy_buf[q], iz_buf[t]]
                    if y < 0.0:
                        y = 0.0
                    ym = y ** (p - 1.0) - fm
                    d = y ** (0.5 * p) - fh
                    s_i += wa * (y ** p - fp)
                    s_j += wa * d * d
                    s_l += wa * xi_w * ym
                    s_m += wa * ym
        out[0, ix, iy, iz] = s_i
        out[1, ix, iy, iz] = s_j
        out[2, ix, iy, iz] = s_l
        out[3, ix, iy, iz] = s_m
    return out


def _check_pair(g: Distribution, f: Distribution):
    if not g.same_grid(f):
        raise GridError(f"Сетки не совпадают: {g.grid} и {f.grid}")


def _delta2(kp: KernelParams) -> float:
    return float(kp.delta_rel) ** 2


def post_collision_velocities(v, v_star, sigma, tol: float = 1e-12):
    """v' = (v+v*)/2 + |v-v*|σ/2, v'* = (v+v*)/2 - |v-v*|σ/2"""
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if abs(np.linalg.norm(sigma) - 1.0) > tol:
        raise CollisionError(f"σ не единичный: |σ| = {np.linalg.norm(sigma)!r}")
    center = 0.5 * (v + v_star)
    half = 0.5 * np.linalg.norm(v - v_star)
    return center + half * sigma, center - half * sigma


def q_direct(g: Distribution, f: Distribution, kp: KernelParams, aq: AngularQuadrature,
             deposit: str = 'trilinear', boundary: str = 'zero',
             n_chunks: int = DEFAULT_CHUNKS) -> CollisionOutput:
    """
    Q(g, f) прямой квадратурой по всем парам узлов и угловым узлам

    Произведение g(v*)f(v)Φb·вес каждой пары переносится на шаблон
    интерполяции точки v' (транспонированная интерполяция), потери
    считаются в узле v. Диагональные пары (r = 0) дают ноль и пропускаются.

    Args:
        deposit: 'trilinear' (8 узлов) или 'quadratic' (27 узлов, сохраняет энергию)
        boundary: 'zero' (продолжение нулём, утечка учитывается) или 'periodic'
    """
    _check_pair(g, f)
    if deposit not in DEPOSIT_ORDERS:
        raise CollisionError(f"Неизвестный шаблон переноса: {deposit}")
    if boundary not in BOUNDARY_MODES:
        raise CollisionError(f"Неизвестный режим границы: {boundary}")
    grid = f.grid
    tab = aq.tables(kp)
    started = time.perf_counter()
    gain, loss, leak, evals = _deposit_kernel(
        np.ascontiguousarray(g.values), np.ascontiguousarray(f.values), grid.coords, grid.spacing,
        tab['ct'], tab['st'], tab['aw'], tab['cphi'], tab['sphi'],
        float(kp.gamma), _delta2(kp), DEPOSIT_ORDERS[deposit], BOUNDARY_MODES[boundary], int(n_chunks),
    )
    wall_ms = (time.perf_counter() - started) * 1e3
    vol = grid.cell_volume
    gain = gain * vol
    loss = loss * vol
    stats = {
        'solver': 'direct',
        'deposit': deposit,
        'kernel_evals': int(evals),
        'wall_ms': wall_ms,
        'leakage': float(leak * vol * vol),
    }
    logger.debug(f"q_direct n={grid.n}: {evals} вычислений ядра за {wall_ms:.1f} мс")
    return CollisionOutput(grid, gain - loss, gain, loss, stats)


def collision_functional_sums(g: Distribution, f: Distribution, x_weight: np.ndarray, p: float,
                              kp: KernelParams, aq: AngularQuadrature, boundary: str = 'zero') -> Dict[str, float]:
    """
    Суммы по одному набору столкновений с f' = интерполяция f в точке v'

    I_p   = Σ g* [(f')^p - f^p] B
    J_p   = Σ g* [(f')^{p/2} - f^{p/2}]^2 B
    pair  = Σ g* x [(f')^{p-1} - f^{p-1}] B
    I_p-1 = Σ g* [(f')^{p-1} - f^{p-1}] B
    """
    _check_pair(g, f)
    if boundary not in BOUNDARY_MODES:
        raise CollisionError(f"Неизвестный режим границы: {boundary}")
    grid = f.grid
    tab = aq.tables(kp)
    out = _gather_kernel(
        np.ascontiguousarray(g.values), np.ascontiguousarray(f.values),
        np.ascontiguousarray(np.asarray(x_weight, dtype=float)), float(p),
        grid.coords, grid.spacing, tab['ct'], tab['st'], tab['aw'], tab['cphi'], tab['sphi'],
        float(kp.gamma), _delta2(kp), BOUNDARY_MODES[boundary],
    )
    vol2 = grid.cell_volume ** 2
    return {
        'I_p': float(out[0].sum() * vol2),
        'J_p': float(out[1].sum() * vol2),
        'pairing': float(out[2].sum() * vol2),
        'I_p_minus_1': float(out[3].sum() * vol2),
    }


# Независимые numpy-реализации слабых форм

def interpolate(values: np.ndarray, grid: VelocityGrid, points: np.ndarray,
                boundary: str = 'zero', order: int = 1) -> np.ndarray:
    """Интерполяция сеточной функции в произвольных точках (..., 3)"""
    points = np.asarray(points, dtype=float)
    shape = points.shape[:-1]
    pts = points.reshape(-1, 3)
    n = grid.n
    xi = (pts - grid.coords[0]) / grid.spacing
    if order == 1:
        base = np.floor(xi).astype(np.int64)
        t = xi - base
        offsets = (0, 1)
        axis_w = [np.stack([1.0 - t[:, d], t[:, d]]) for d in range(3)]
    elif order == 2:
        base = np.floor(xi + 0.5).astype(np.int64) - 1
        s = xi - (base + 1)
        offsets = (0, 1, 2)
        axis_w = [np.stack([0.5 * s[:, d] * (s[:, d] - 1.0), 1.0 - s[:, d] ** 2, 0.5 * s[:, d] * (s[:, d] + 1.0)])
                  for d in range(3)]
    else:
        raise CollisionError(f"Порядок интерполяции {order} не поддерживается")
    flat = np.asarray(values, dtype=float).ravel()
    result = np.zeros(len(pts))
    for a in offsets:
        ia = base[:, 0] + a
        for b in offsets:
            ib = base[:, 1] + b
            for c in offsets:
                ic = base[:, 2] + c
                w = axis_w[0][a] * axis_w[1][b] * axis_w[2][c]
                if boundary == 'periodic':
                    idx = np.ravel_multi_index((ia % n, ib % n, ic % n), grid.shape)
                    result += w * flat[idx]
                else:
                    inside = (ia >= 0) & (ia < n) & (ib >= 0) & (ib < n) & (ic >= 0) & (ic < n)
                    idx = np.ravel_multi_index((np.clip(ia, 0, n - 1), np.clip(ib, 0, n - 1), np.clip(ic, 0, n - 1)),
                                               grid.shape)
                    result += np.where(inside, w * flat[idx], 0.0)
    return result.reshape(shape)


def _frames(k: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.zeros_like(k)
    use_y = np.abs(k[:, 0]) > 0.9
    a[use_y, 1] = 1.0
    a[~use_y, 0] = 1.0
    e1 = np.cross(k, a)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(k, e1)
    return e1, e2


def _pair_iterator(g: Distribution, f: Distribution, kp: KernelParams, aq: AngularQuadrature):
    """Для каждого узла v: (i, индексы j, веса K, v', v'*) векторно по (j, θ, φ)"""
    grid = f.grid
    tab = aq.tables(kp)
    vx, vy, vz = grid.mesh()
    nodes = np.stack([vx.ravel(), vy.ravel(), vz.ravel()], axis=1)
    g_flat = g.values.ravel()
    ct, st, aw = tab['ct'], tab['st'], tab['aw']
    cphi, sphi = tab['cphi'], tab['sphi']
    for i in range(grid.size):
        u = nodes[i] - nodes
        r = np.linalg.norm(u, axis=1)
        mask = (r > 0.0) & (g_flat != 0.0)
        if not mask.any():
            continue
        j_idx = np.nonzero(mask)[0]
        u = u[mask]
        r = r[mask]
        k = u / r[:, None]
        e1, e2 = _frames(k)
        # σ[j, a, b, :]
        radial = ct[None, :, None, None] * k[:, None, None, :]
        tangential = st[None, :, None, None] * (
            cphi[None, None, :, None] * e1[:, None, None, :] + sphi[None, None, :, None] * e2[:, None, None, :])
        sigma = radial + tangential
        center = 0.5 * (nodes[i] + nodes[j_idx])
        half = 0.5 * r
        vp = center[:, None, None, :] + half[:, None, None, None] * sigma
        vps = center[:, None, None, :] - half[:, None, None, None] * sigma
        kern = phi(r, kp)[:, None, None] * aw[None, :, None] * np.ones(len(cphi))[None, None, :]
        yield i, j_idx, kern, vp, vps


def _phi_evaluator(phi_fn: Callable, grid: VelocityGrid, interpolate_phi: bool, order: int):
    vx, vy, vz = grid.mesh()
    nodes = np.stack([vx, vy, vz], axis=-1)
    node_values = np.asarray(phi_fn(nodes), dtype=float) * np.ones(grid.shape)
    if interpolate_phi:
        def at(points):
            return interpolate(node_values, grid, points, order=order)
    else:
        def at(points):
            return np.asarray(phi_fn(points), dtype=float) * np.ones(points.shape[:-1])
    return node_values.ravel(), at


def q_weak_pairing_asym(g: Distribution, f: Distribution, phi_fn: Callable, kp: KernelParams,
                        aq: AngularQuadrature, interpolate_phi: bool = False, order: int = 1) -> float:
    """∫∫∫ (φ' - φ) g* f B прямой квадратурой"""
    _check_pair(g, f)
    grid = f.grid
    phi_nodes, phi_at = _phi_evaluator(phi_fn, grid, interpolate_phi, order)
    f_flat = f.values.ravel()
    g_flat = g.values.ravel()
    total = 0.0
    for i, j_idx, kern, vp, _ in _pair_iterator(g, f, kp, aq):
        if f_flat[i] == 0.0:
            continue
        weight = kern * g_flat[j_idx][:, None, None] * f_flat[i]
        total += float(np.sum(weight * (phi_at(vp) - phi_nodes[i])))
    return total * grid.cell_volume ** 2


def q_weak_pairing_sym(g: Distribution, f: Distribution, phi_fn: Callable, kp: KernelParams,
                       aq: AngularQuadrature, interpolate_phi: bool = False, order: int = 1,
                       gain_form: str = 'deposit', printed_variant: bool = False) -> float:
    """
    -1/4 ∫∫∫ (φ' + φ'* - φ - φ*)(g'* f' - g* f) B

    gain_form='deposit': половина с g'*f' берётся по мере, перенесённой в точки
    после столкновения (как в q_direct); тогда выражение равно
    1/2 Σ g* f (φ' + φ'* - φ - φ*) B. gain_form='gather': g'*, f' интерполируются.
    printed_variant=True использует множитель (g'* f* - g* f).
    """
    _check_pair(g, f)
    if gain_form not in ('deposit', 'gather'):
        raise CollisionError(f"Неизвестная форма прироста: {gain_form}")
    grid = f.grid
    phi_nodes, phi_at = _phi_evaluator(phi_fn, grid, interpolate_phi, order)
    f_flat = f.values.ravel()
    g_flat = g.values.ravel()
    total = 0.0
    for i, j_idx, kern, vp, vps in _pair_iterator(g, f, kp, aq):
        delta_phi = phi_at(vp) + phi_at(vps) - phi_nodes[i] - phi_nodes[j_idx][:, None, None]
        loss_product = g_flat[j_idx][:, None, None] * f_flat[i]
        if printed_variant:
            gain_product = interpolate(g.values, grid, vps) * f_flat[j_idx][:, None, None]
            total += -0.25 * float(np.sum(kern * delta_phi * (gain_product - loss_product)))
        elif gain_form == 'gather':
            gain_product = interpolate(g.values, grid, vps) * interpolate(f.values, grid, vp)
            total += -0.25 * float(np.sum(kern * delta_phi * (gain_product - loss_product)))
        else:
            # φ(до) - φ(после) = -(φ(после) - φ(до)) для перенесённой меры
            total += 0.5 * float(np.sum(kern * loss_product * delta_phi))
    return total * grid.cell_volume ** 2


def q_pairing_direct(q: CollisionOutput, phi_fn: Callable) -> float:
    """Σ Q φ h^3"""
    vx, vy, vz = q.grid.mesh()
    values = np.asarray(phi_fn(np.stack([vx, vy, vz], axis=-1)), dtype=float) * np.ones(q.grid.shape)
    return float(np.sum(q.q_values * values) * q.grid.cell_volume)


def moments(f: Distribution) -> Tuple[float, np.ndarray, float]:
    """Масса, импульс и энергия: Σ f (1, v, |v|^2) h^3"""
    vol = f.grid.cell_volume
    vx, vy, vz = f.grid.mesh()
    values = f.values
    mass = float(values.sum() * vol)
    momentum = np.array([(values * vx).sum(), (values * vy).sum(), (values * vz).sum()]) * vol
    energy = float((values * (vx * vx + vy * vy + vz * vz)).sum() * vol)
    return mass, momentum, energy


def h_functional(f: Distribution) -> float:
    """Σ f log f h^3 (узлы с f = 0 дают 0)"""
    return float(xlogy(f.values, f.values).sum() * f.grid.cell_volume)


def lattice_kernel(grid: VelocityGrid, kp: KernelParams) -> np.ndarray:
    """Φ(|m h|) на решётке смещений (2n-1)^3 с нулём в центре"""
    offsets = (np.arange(2 * grid.n - 1) - (grid.n - 1)) * grid.spacing
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing='ij')
    r = np.sqrt(ox * ox + oy * oy + oz * oz)
    kern = np.zeros_like(r)
    nonzero = r > 0.0
    kern[nonzero] = phi(r[nonzero], kp)
    return kern


def loss_rate(g: Distribution, kp: KernelParams, aq: AngularQuadrature) -> np.ndarray:
    """ν(v) = Σ_{v*≠v} g(v*) Φ(|v-v*|) h^3 · Σ b·вес (свёрткой через FFT)"""
    conv = fftconvolve(g.values, lattice_kernel(g.grid, kp), mode='same')
    conv = np.maximum(conv, 0.0)
    return conv * g.grid.cell_volume * aq.angular_mass(kp)


def h_dissipation(f: Distribution, kp: KernelParams, aq: AngularQuadrature,
                  tolerance: float = 1e-8, deposit: str = 'trilinear') -> Dict[str, Any]:
    """Σ Q(f,f) log f h^3 <= tolerance для строго положительного f"""
    if np.any(f.values <= 0.0):
        raise CollisionError("Проверка H-теоремы требует f > 0 во всех узлах")
    q = q_direct(f, f, kp, aq, deposit=deposit)
    value = float(np.sum(q.q_values * np.log(f.values)) * f.grid.cell_volume)
    return {'check_name': 'h_dissipation', 'lhs': value, 'rhs': tolerance, 'pass': value <= tolerance}
