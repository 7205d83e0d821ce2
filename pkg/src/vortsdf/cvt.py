"""Approximate SDF-aware CVT optimization.

Each free site is pushed so that, along three random orthogonal directions,
the distance to the nearest bisector plane ahead equals the distance behind.
No Voronoi cell is ever built: only the k nearest neighbors' bisectors are
intersected with the sampled rays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .geom import FREE, SiteSet, build_kdtree, knn_table

_PAR_EPS = 1e-12
_FAR = 1e300


@dataclass
class CvtConfig:
    n_neighbors: int = 24
    n_iterations: int = 300
    knn_refresh_period: int = 100
    # None -> 0.02 x mean initial nearest-neighbor spacing
    learning_rate: float | None = None
    # multiplicative decay reached at the last iteration (linear in log space)
    lr_final_ratio: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_neighbors < 4:
            raise ValueError("n_neighbors must be >= 4")
        for name in ("n_iterations", "knn_refresh_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def random_basis(theta: float, phi: float) -> np.ndarray:
    """Rows e0, e1, e2: the Cartesian basis rotated by phi about z, then theta about y."""
    return _rotation(theta, phi).T.copy()


def _rotation(theta, phi):
    ct, st, cp, sp = math.cos(theta), math.sin(theta), math.cos(phi), math.sin(phi)
    ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rz


def plane_fraction(sdf_i: float, sdf_j: float) -> float:
    """Where the (possibly shifted) bisector cuts segment s_i -> s_j."""
    if sdf_i * sdf_j < 0.0:
        return sdf_i / (sdf_i - sdf_j)
    return 0.5


def bisector_hit(s_i, s_j, sdf_i, sdf_j, r):
    """Distance along unit ``r`` from ``s_i`` to its bisector with ``s_j``, or None.

    When the SDF changes sign between the two sites the plane is moved from the
    midpoint to the linear zero crossing.
    """
    s_i = np.asarray(s_i, dtype=np.float64)
    delta = np.asarray(s_j, dtype=np.float64) - s_i
    denom = float(np.dot(delta, r))
    if denom <= _PAR_EPS * float(np.dot(delta, delta)) ** 0.5:
        return None
    return plane_fraction(sdf_i, sdf_j) * float(np.dot(delta, delta)) / denom


def directional_distance(i, r, neighbors, positions, sdf=None, d_max=None):
    """Nearest bisector hit along ``r`` over ``neighbors``; ``d_max`` when none is hit."""
    positions = np.asarray(positions, dtype=np.float64)
    if d_max is None:
        d_max = float(np.linalg.norm(positions.max(0) - positions.min(0)))
    best = d_max
    for j in neighbors:
        si = 0.0 if sdf is None else sdf[i]
        sj = 0.0 if sdf is None else sdf[j]
        t = bisector_hit(positions[i], positions[j], si, sj, r)
        if t is not None and t < best:
            best = t
    return best


def sample_angles(seed: int, iteration: int, n: int) -> np.ndarray:
    """Per-site (theta, phi) from a counter-based stream keyed on (seed, iteration)."""
    gen = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF, counter=[iteration, 0, 0, 0]))
    u = gen.random((n, 2))
    return np.column_stack([u[:, 0] * np.pi, u[:, 1] * 2.0 * np.pi])


@nb.njit(cache=True, parallel=True)
def _cvt_kernel(pos, sdf, use_sdf, knn, free, angles, lo, hi, use_walls, d_max,
                self_grad, nb_idx, nb_grad, site_loss, best, fr, wall):
    for i in nb.prange(knn.shape[0]):
        _site_terms(i, pos, sdf, use_sdf, knn, free, angles, lo, hi, use_walls, d_max,
                    self_grad, nb_idx, nb_grad, site_loss, best, fr, wall)


@nb.njit(cache=True, fastmath=True)
def _site_terms(i, pos, sdf, use_sdf, knn, free, angles, lo, hi, use_walls, d_max,
                self_grad, nb_idx, nb_grad, site_loss, best, fr, wall):
    k = knn.shape[1]
    site_loss[i] = 0.0
    for c in range(3):
        self_grad[i, c] = 0.0
    for q in range(6):
        nb_idx[i, q] = -1
        for c in range(3):
            nb_grad[i, q, c] = 0.0
    if free[i] == 0:
        return
    ct = math.cos(angles[i, 0])
    st = math.sin(angles[i, 0])
    cp = math.cos(angles[i, 1])
    sp = math.sin(angles[i, 1])
    # rows are the columns of Ry(theta) @ Rz(phi)
    basis = ((ct * cp, sp, -st * cp), (-ct * sp, cp, st * sp), (st, 0.0, ct))
    # slot = 2 * axis + side; side 0 looks along +e, side 1 along -e
    best_i = best[i]
    arg = nb_idx[i]
    fr_i = fr[i]
    wall_i = wall[i]
    for q in range(6):
        wall_i[q] = -1
    px, py, pz = pos[i, 0], pos[i, 1], pos[i, 2]
    r00, r01, r02 = basis[0]
    r10, r11, r12 = basis[1]
    r20, r21, r22 = basis[2]
    # running minima per slot kept in registers: b=distance, a=argmin, f=plane fraction
    b0 = b1 = b2 = b3 = b4 = b5 = d_max
    a0 = a1 = a2 = a3 = a4 = a5 = -1
    f0 = f1 = f2 = f3 = f4 = f5 = 0.0
    # Every hit satisfies t >= frac * |delta| and the knn rows are sorted by
    # distance, so the scan stops once that bound clears all six minima.
    fmin = 0.5
    if use_sdf:
        for q in range(k):
            j = knn[i, q]
            if sdf[i] * sdf[j] < 0.0:
                fmin = min(fmin, sdf[i] / (sdf[i] - sdf[j]))
    fmin2 = fmin * fmin
    for q in range(k):
        j = knn[i, q]
        d0 = pos[j, 0] - px
        d1 = pos[j, 1] - py
        d2 = pos[j, 2] - pz
        dd = d0 * d0 + d1 * d1 + d2 * d2
        bmax = max(max(max(b0, b1), max(b2, b3)), max(b4, b5))
        if fmin2 * dd >= bmax * bmax:
            break
        frac = 0.5
        if use_sdf:
            if sdf[i] * sdf[j] < 0.0:
                frac = sdf[i] / (sdf[i] - sdf[j])
        num = frac * dd
        tol = _PAR_EPS * math.sqrt(dd)
        dr = d0 * r00 + d1 * r01 + d2 * r02
        t = num / abs(dr) if abs(dr) > tol else _FAR
        tp = t if dr > 0.0 else _FAR
        tm = t if dr < 0.0 else _FAR
        c = tp < b0
        b0 = tp if c else b0
        a0 = j if c else a0
        f0 = frac if c else f0
        c = tm < b1
        b1 = tm if c else b1
        a1 = j if c else a1
        f1 = frac if c else f1
        dr = d0 * r10 + d1 * r11 + d2 * r12
        t = num / abs(dr) if abs(dr) > tol else _FAR
        tp = t if dr > 0.0 else _FAR
        tm = t if dr < 0.0 else _FAR
        c = tp < b2
        b2 = tp if c else b2
        a2 = j if c else a2
        f2 = frac if c else f2
        c = tm < b3
        b3 = tm if c else b3
        a3 = j if c else a3
        f3 = frac if c else f3
        dr = d0 * r20 + d1 * r21 + d2 * r22
        t = num / abs(dr) if abs(dr) > tol else _FAR
        tp = t if dr > 0.0 else _FAR
        tm = t if dr < 0.0 else _FAR
        c = tp < b4
        b4 = tp if c else b4
        a4 = j if c else a4
        f4 = frac if c else f4
        c = tm < b5
        b5 = tm if c else b5
        a5 = j if c else a5
        f5 = frac if c else f5
    best_i[0], best_i[1], best_i[2], best_i[3], best_i[4], best_i[5] = b0, b1, b2, b3, b4, b5
    arg[0], arg[1], arg[2], arg[3], arg[4], arg[5] = a0, a1, a2, a3, a4, a5
    fr_i[0], fr_i[1], fr_i[2], fr_i[3], fr_i[4], fr_i[5] = f0, f1, f2, f3, f4, f5
    if use_walls:
        for axis in range(3):
            for a in range(3):
                ra = basis[axis][a]
                if ra > _PAR_EPS:
                    tp = (hi[a] - pos[i, a]) / ra
                    tm = (pos[i, a] - lo[a]) / ra
                elif ra < -_PAR_EPS:
                    tp = (lo[a] - pos[i, a]) / ra
                    tm = (pos[i, a] - hi[a]) / ra
                else:
                    continue
                if tp < best_i[2 * axis]:
                    best_i[2 * axis] = tp
                    arg[2 * axis] = -2
                    wall_i[2 * axis] = a
                if tm < best_i[2 * axis + 1]:
                    best_i[2 * axis + 1] = tm
                    arg[2 * axis + 1] = -2
                    wall_i[2 * axis + 1] = a
    for axis in range(3):
        diff = best_i[2 * axis] - best_i[2 * axis + 1]
        site_loss[i] += 0.5 * diff * diff
        if diff == 0.0:
            continue
        r = basis[axis]
        for side in range(2):
            slot = 2 * axis + side
            sign = 1.0 - 2.0 * side
            s0 = sign * r[0]
            s1 = sign * r[1]
            s2 = sign * r[2]
            coef = sign * diff  # dL/d(distance on this side)
            j = arg[slot]
            if j >= 0:
                d0 = pos[j, 0] - px
                d1 = pos[j, 1] - py
                d2 = pos[j, 2] - pz
                dr = d0 * s0 + d1 * s1 + d2 * s2
                dist = best_i[slot]
                frac = fr_i[slot]
                # d = c|delta|^2 / (delta.s)  =>  dd/ddelta = (2c delta - d s) / (delta.s)
                g0 = coef * (2.0 * frac * d0 - dist * s0) / dr
                g1 = coef * (2.0 * frac * d1 - dist * s1) / dr
                g2 = coef * (2.0 * frac * d2 - dist * s2) / dr
                nb_grad[i, slot, 0] = g0
                nb_grad[i, slot, 1] = g1
                nb_grad[i, slot, 2] = g2
                self_grad[i, 0] -= g0
                self_grad[i, 1] -= g1
                self_grad[i, 2] -= g2
            elif j == -2:
                # d = (b - x_a) / s_a  =>  dd/dx_a = -1 / s_a
                a = wall_i[slot]
                sa = s0 if a == 0 else (s1 if a == 1 else s2)
                self_grad[i, a] -= coef / sa


@nb.njit(cache=True)
def _scatter(self_grad, nb_idx, nb_grad, free, grad):
    n = self_grad.shape[0]
    for i in range(n):
        for c in range(3):
            grad[i, c] += self_grad[i, c]
    for i in range(n):
        for q in range(6):
            j = nb_idx[i, q]
            if j >= 0:
                for c in range(3):
                    grad[j, c] += nb_grad[i, q, c]
    for i in range(n):
        if free[i] == 0:
            for c in range(3):
                grad[i, c] = 0.0


class _Workspace:
    def __init__(self, n):
        self.n = n
        self.self_grad = np.empty((n, 3))
        self.nb_idx = np.empty((n, 6), dtype=np.int64)
        self.nb_grad = np.empty((n, 6, 3))
        self.site_loss = np.empty(n)
        self.best = np.empty((n, 6))
        self.fr = np.empty((n, 6))
        self.wall = np.empty((n, 6), dtype=np.int64)
        self.grad = np.empty((n, 3))


def cvt_loss_and_grad(positions, sdf, knn, free, angles, bounds=None, d_max=None, workspace=None):
    """Approximate CVT energy summed over free sites and its gradient.

    ``angles`` holds one (theta, phi) pair per site. The argmin neighbor of
    every sampled direction is held fixed (subgradient of the min). With
    ``bounds=(lo, hi)`` the box faces act as extra walls so hull sites stay
    balanced instead of drifting outward. Non-free sites get zero gradient.
    The returned gradient aliases ``workspace`` when one is passed.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    n = len(positions)
    if d_max is None:
        d_max = float(np.linalg.norm(positions.max(0) - positions.min(0)))
    use_sdf = sdf is not None
    sdf_arr = np.ascontiguousarray(sdf if use_sdf else np.zeros(n), dtype=np.float64)
    use_walls = bounds is not None
    lo, hi = (np.asarray(bounds[0], float), np.asarray(bounds[1], float)) if use_walls else (np.zeros(3), np.zeros(3))
    free_arr = np.ascontiguousarray(free, dtype=np.uint8)
    ws = workspace if workspace is not None and workspace.n == n else _Workspace(n)
    _cvt_kernel(positions, sdf_arr, use_sdf, np.ascontiguousarray(knn, dtype=np.int32), free_arr,
                np.ascontiguousarray(angles, dtype=np.float64), lo, hi, use_walls, float(d_max),
                ws.self_grad, ws.nb_idx, ws.nb_grad, ws.site_loss, ws.best, ws.fr, ws.wall)
    ws.grad[:] = 0.0
    _scatter(ws.self_grad, ws.nb_idx, ws.nb_grad, free_arr, ws.grad)
    return float(np.sum(ws.site_loss)), ws.grad


@nb.njit(cache=True)
def _adam_update(pos, grad, idx, m, v, t, lr, beta1, beta2, eps, lo, hi, clip):
    """Fused Adam step on pos[idx] (same arithmetic as optim.adam_step) plus box clamp."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for q in range(idx.shape[0]):
        i = idx[q]
        for c in range(3):
            g = grad[i, c]
            m[q, c] = beta1 * m[q, c] + (1.0 - beta1) * g
            v[q, c] = beta2 * v[q, c] + (1.0 - beta2) * g * g
            x = pos[i, c] - lr * (m[q, c] / c1) / (math.sqrt(v[q, c] / c2) + eps)
            if clip:
                x = min(max(x, lo[c]), hi[c])
            pos[i, c] = x


def mean_spacing(positions, mask=None) -> float:
    pos = positions if mask is None else positions[mask]
    d, _ = build_kdtree(pos).query(pos, k=2)
    return float(np.mean(d[:, 1]))


def nn_distance_variance(positions, mask=None) -> float:
    pos = positions if mask is None else positions[mask]
    d, _ = build_kdtree(pos).query(pos, k=2)
    return float(np.var(d[:, 1]))


def morton_order(positions) -> np.ndarray:
    """Permutation sorting points along a 3D Z-order curve (21 bits per axis)."""
    lo = positions.min(0)
    span = max(float(np.max(positions.max(0) - lo)), 1e-300)
    q = np.minimum(((positions - lo) / span * (2**21 - 1)).astype(np.uint64), np.uint64(2**21 - 1))
    code = np.zeros(len(positions), dtype=np.uint64)
    for axis in range(3):
        x = q[:, axis]
        x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
        x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
        x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
        x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
        x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
        code |= x << np.uint64(axis)
    return np.argsort(code, kind="stable")


def optimize_cvt(sites: SiteSet, sdf, cfg: CvtConfig, bounds=None, history=None, callback=None) -> SiteSet:
    """Adam descent of the approximate CVT energy on free-site positions.

    SDF values stay frozen during the phase. Free sites are clamped to
    ``bounds`` after every step when given. Per-iteration losses are appended
    to ``history`` if a list is passed; ``callback(iteration, positions)`` runs
    after each step.
    """
    # Work in Z-order so neighbor lookups stay cache-local; angles stay keyed
    # on the original site index.
    perm = morton_order(sites.positions)
    pos = sites.positions[perm].copy()
    free = sites.kind[perm] == FREE
    sdf_p = None if sdf is None else np.asarray(sdf, dtype=np.float64)[perm]
    d_max = float(np.linalg.norm(pos.max(0) - pos.min(0)))
    lr = cfg.learning_rate if cfg.learning_rate is not None else 0.02 * mean_spacing(pos, free)
    decay = cfg.lr_final_ratio ** (1.0 / max(cfg.n_iterations - 1, 1))
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros((int(free.sum()), 3))
    v = np.zeros_like(m)
    clip = bounds is not None
    lo, hi = (np.asarray(bounds[0], float), np.asarray(bounds[1], float)) if clip else (np.zeros(3), np.zeros(3))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    table = None
    ws = _Workspace(len(pos))
    free_idx = np.nonzero(free)[0]
    for it in range(cfg.n_iterations):
        if it % cfg.knn_refresh_period == 0:
            table = knn_table(build_kdtree(pos), cfg.n_neighbors)
        angles = sample_angles(cfg.rng_seed, it, len(pos))[perm]
        loss, grad = cvt_loss_and_grad(pos, sdf_p, table, free, angles, bounds, d_max, ws)
        if history is not None:
            history.append(loss)
        _adam_update(pos, grad, free_idx, m, v, it + 1, lr * decay**it, beta1, beta2, eps, lo, hi, clip)
        if callback is not None:
            callback(it + 1, pos[inv])
    return SiteSet(pos[inv], sites.kind.copy(), sites.level)
