"""Differentiable volume rendering over tet segments.

Forward: march -> prune -> split at SDF zero crossings -> midpoint samples ->
coarse and fine color networks -> alpha compositing -> photometric loss.
Backward is written out by hand and returns gradients for site SDF values,
both feature sets and every network weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.special import expit

from .traverse import Ray, march_rays, prune

COARSE_IN = 19
FINE_IN = 25


# -- alpha ------------------------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def alpha_terms(sdf_a, sdf_b, beta: float, literal: bool = False):
    """Opacity of a segment and its partials w.r.t. the entry/exit SDF.

    With r = sigmoid(beta*sdf_b) / sigmoid(beta*sdf_a) the default opacity is
    clip(1 - r, 0, 1); ``literal`` gives clip(r, 0, 1) instead. Clamped
    entries get a zero gradient.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    sa = np.asarray(sdf_a, dtype=np.float64)
    sb = np.asarray(sdf_b, dtype=np.float64)
    # log r >= 0 means a receding segment; clamping avoids overflow there
    r = np.exp(np.minimum(_log_sigmoid(beta * sb) - _log_sigmoid(beta * sa), 0.0))
    dr_a = -r * beta * expit(-beta * sa)
    dr_b = r * beta * expit(-beta * sb)
    live = r < 1.0
    if literal:
        a = np.where(live, r, 1.0)
        return a, np.where(live, dr_a, 0.0), np.where(live, dr_b, 0.0)
    a = np.where(live, 1.0 - r, 0.0)
    return a, np.where(live, -dr_a, 0.0), np.where(live, -dr_b, 0.0)


def alpha_values(sdf_a, sdf_b, beta: float, literal: bool = False):
    return alpha_terms(sdf_a, sdf_b, beta, literal)[0]


def alpha(sdf_in: float, sdf_out: float, beta: float, literal: bool = False) -> float:
    return float(alpha_values(sdf_in, sdf_out, beta, literal))


def beta_schedule(iteration: int, level: int, beta0: float = 30.0, growth: float = 1.3, cap0: float = 200.0) -> float:
    """Sharpness grows geometrically with the iteration count; the cap doubles per level."""
    return float(min(beta0 * growth ** (iteration / 1000.0), cap0 * 2.0**level))


# -- compositing ------------------------------------------------------------

@nb.njit(cache=True)
def _composite_fwd(offsets, alphas, colors, out_c, weights, trans, t_final):
    for r in range(offsets.shape[0] - 1):
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for s in range(offsets[r], offsets[r + 1]):
            trans[s] = T
            w = alphas[s] * T
            weights[s] = w
            c0 += w * colors[s, 0]
            c1 += w * colors[s, 1]
            c2 += w * colors[s, 2]
            T *= 1.0 - alphas[s]
        out_c[r, 0] = c0
        out_c[r, 1] = c1
        out_c[r, 2] = c2
        t_final[r] = T


@nb.njit(cache=True)
def _composite_bwd(offsets, alphas, colors, weights, trans, d_c, d_alpha, d_colors):
    # Suffix color A_t = a_{t+1} c_{t+1} + (1 - a_{t+1}) A_{t+1}; dC/da_t = T_t (c_t - A_t)
    for r in range(offsets.shape[0] - 1):
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        g0 = d_c[r, 0]
        g1 = d_c[r, 1]
        g2 = d_c[r, 2]
        for s in range(offsets[r + 1] - 1, offsets[r] - 1, -1):
            w = weights[s]
            d_colors[s, 0] = w * g0
            d_colors[s, 1] = w * g1
            d_colors[s, 2] = w * g2
            c0 = colors[s, 0]
            c1 = colors[s, 1]
            c2 = colors[s, 2]
            d_alpha[s] += trans[s] * ((c0 - a0) * g0 + (c1 - a1) * g1 + (c2 - a2) * g2)
            al = alphas[s]
            a0 = al * c0 + (1.0 - al) * a0
            a1 = al * c1 + (1.0 - al) * a1
            a2 = al * c2 + (1.0 - al) * a2


def composite_batch(offsets, alphas, colors):
    """Returns (C per ray, weights, transmittance before each segment, final T)."""
    n = len(offsets) - 1
    m = len(alphas)
    out_c = np.zeros((n, 3))
    weights = np.empty(m)
    trans = np.empty(m)
    t_final = np.empty(n)
    _composite_fwd(np.asarray(offsets, np.int64), np.ascontiguousarray(alphas, dtype=np.float64),
                   np.ascontiguousarray(colors, dtype=np.float64), out_c, weights, trans, t_final)
    return out_c, weights, trans, t_final


def composite_backward(offsets, alphas, colors, weights, trans, d_c, d_alpha=None):
    """Adds dL/d alpha into ``d_alpha`` and returns (d_alpha, dL/d colors)."""
    if d_alpha is None:
        d_alpha = np.zeros(len(alphas))
    d_colors = np.empty((len(alphas), 3))
    _composite_bwd(np.asarray(offsets, np.int64), np.ascontiguousarray(alphas, dtype=np.float64),
                   np.ascontiguousarray(colors, dtype=np.float64), weights, trans,
                   np.ascontiguousarray(d_c, dtype=np.float64), d_alpha, d_colors)
    return d_alpha, d_colors


def composite(alphas, colors):
    """Single ray: color and per-segment weights."""
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(alphas) != len(colors):
        raise ValueError("alphas and colors differ in length")
    c, w, _, _ = composite_batch(np.array([0, len(alphas)]), alphas, colors)
    return c[0], w


def reflect(v, n):
    v = np.asarray(v, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


# -- networks ---------------------------------------------------------------

def _init_mlp(rng, sizes):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        layers.append(np.zeros(fan_out))
    return layers


@dataclass
class NetworkParams:
    """Weights of both color networks as flat lists [W0, b0, W1, b1, ...]."""

    coarse: list
    fine: list
    adam: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, seed: int = 0, hidden: int = 64, depth: int = 2) -> "NetworkParams":
        rng = np.random.default_rng(seed)
        mid = [hidden] * depth
        return cls(_init_mlp(rng, [COARSE_IN, *mid, 3]), _init_mlp(rng, [FINE_IN, *mid, 3]))

    def arrays(self) -> list:
        return self.coarse + self.fine

    def zeros_like(self) -> list:
        return [np.zeros_like(a) for a in self.arrays()]

    def copy(self) -> "NetworkParams":
        return NetworkParams([a.copy() for a in self.coarse], [a.copy() for a in self.fine])


def mlp_forward(layers, x):
    """ReLU hidden layers, sigmoid output. Returns (out, cache)."""
    acts = [x]
    h = x
    n = len(layers) // 2
    for i in range(n):
        z = h @ layers[2 * i] + layers[2 * i + 1]
        h = np.maximum(z, 0.0) if i < n - 1 else expit(z)
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, d_out):
    """Returns (dL/dx, [dW0, db0, ...])."""
    n = len(layers) // 2
    grads = [None] * len(layers)
    out = acts[-1]
    dz = d_out * out * (1.0 - out)
    for i in range(n - 1, -1, -1):
        h = acts[i]
        grads[2 * i] = h.T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        dh = dz @ layers[2 * i].T
        if i > 0:
            dz = dh * (acts[i] > 0.0)
    return dh, grads


def coarse_color(p, v, f_geo, normal, f_cse, params: NetworkParams):
    x = np.concatenate([p, v, f_geo, normal, f_cse]).astype(np.float64)[None]
    return mlp_forward(params.coarse, x)[0][0]


def fine_color(p, v_r, c_geo, f_geo, normals_in_out, f_fine, params: NetworkParams):
    x = np.concatenate([p, v_r, c_geo, f_geo, np.ravel(normals_in_out), f_fine]).astype(np.float64)[None]
    return mlp_forward(params.fine, x)[0][0]


# -- loss -------------------------------------------------------------------

def photometric_loss(c_geo, c_fine, c_gt, lam: float, eps: float):
    """sum_i [lam |C - C_geo|^2 + |C - C_fine|^2] / (|C| + eps) and its gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c_geo = np.atleast_2d(np.asarray(c_geo, dtype=np.float64))
    c_fine = np.atleast_2d(np.asarray(c_fine, dtype=np.float64))
    c_gt = np.atleast_2d(np.asarray(c_gt, dtype=np.float64))
    scale = 1.0 / (np.linalg.norm(c_gt, axis=1) + eps)
    eg = c_geo - c_gt
    ef = c_fine - c_gt
    loss = float(np.sum(scale * (lam * np.sum(eg * eg, axis=1) + np.sum(ef * ef, axis=1))))
    return loss, 2.0 * lam * scale[:, None] * eg, 2.0 * scale[:, None] * ef


# -- batched render ---------------------------------------------------------

@dataclass
class RenderConfig:
    lam: float = 1.0
    eps: float = 0.1
    literal_alpha: bool = False
    prune_band: float = 4.0
    t_min: float = 1e-4
    cap: int = 1024


@dataclass
class RenderOutput:
    loss: float
    c_geo: np.ndarray
    c_fine: np.ndarray
    opacity: np.ndarray
    n_samples: int
    grad_sdf: np.ndarray = None
    grad_cse: np.ndarray = None
    grad_fine: np.ndarray = None
    grad_params: list = None


def _normalize(x):
    norm = np.linalg.norm(x, axis=1)
    ok = norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    return np.where(ok[:, None], x / safe[:, None], 0.0), safe, ok


def _normalize_bwd(n, norm, ok, dn):
    dx = (dn - n * np.sum(n * dn, axis=1, keepdims=True)) / norm[:, None]
    return np.where(ok[:, None], dx, 0.0)


def site_gradients(mesh, sdf):
    """Volume-weighted mean of the incident tet SDF gradients, per site."""
    g = np.einsum("tij,tj->ti", mesh.weight_gradients, sdf[mesh.tets])
    vol = mesh.volumes
    n = len(mesh.positions)
    flat = mesh.tets.ravel()
    vsum = np.bincount(flat, weights=np.repeat(vol, 4), minlength=n)
    vsum = np.where(vsum > 0, vsum, 1.0)
    acc = np.stack([np.bincount(flat, weights=np.repeat(vol * g[:, d], 4), minlength=n) for d in range(3)], axis=1)
    return acc / vsum[:, None], vsum


def _site_gradients_bwd(mesh, vsum, d_gs):
    q = d_gs / vsum[:, None]
    dg = mesh.volumes[:, None] * q[mesh.tets].sum(axis=1)
    return _scatter(mesh.tets, np.einsum("tij,ti->tj", mesh.weight_gradients, dg), len(vsum))


def _scatter(idx, vals, n):
    return np.bincount(idx.ravel(), weights=vals.ravel(), minlength=n)


def _scatter_rows(idx, w, d, n):
    flat = idx.ravel()
    vals = (w[:, :, None] * d[:, None, :]).reshape(len(flat), -1)
    return np.stack([np.bincount(flat, weights=vals[:, c], minlength=n) for c in range(d.shape[1])], axis=1)


def render_batch(mesh, state, params: NetworkParams, origins, directions, cams, beta: float,
                 cfg: RenderConfig = None, c_gt=None, keys=None) -> RenderOutput:
    """Render a batch of rays; with ``c_gt`` also the loss and all gradients."""
    cfg = cfg or RenderConfig()
    sdf = np.asarray(state.sdf, dtype=np.float64)
    n_sites = len(sdf)
    seg = march_rays(mesh, cams, origins, directions, cfg.cap, keys)
    seg = prune(seg, mesh, sdf, beta, cfg.prune_band, cfg.t_min)
    n_rays = seg.n_rays
    P = len(seg)
    s_in = seg.sdf_in(sdf)
    s_out = seg.sdf_out(sdf)

    # split parents at the linear zero crossing
    split = s_in * s_out < 0.0
    mult = 1 + split.astype(np.int64)
    parent = np.repeat(np.arange(P), mult)
    second = np.zeros(len(parent), dtype=bool)
    second[(np.cumsum(mult) - 1)[split]] = True
    ps = split[parent]
    first_half = ps & ~second
    length = seg.t_out - seg.t_in
    den = np.where(split, s_in - s_out, 1.0)
    t_star = seg.t_in + length * np.where(split, s_in / den, 0.0)
    dts_in = np.where(split, -length * s_out / den**2, 0.0)
    dts_out = np.where(split, length * s_in / den**2, 0.0)
    t_a = np.where(second, t_star[parent], seg.t_in[parent])
    t_b = np.where(first_half, t_star[parent], seg.t_out[parent])
    sa = np.where(second, 0.0, s_in[parent])
    sb = np.where(first_half, 0.0, s_out[parent])
    tm = 0.5 * (t_a + t_b)
    dtm_in = np.where(ps, 0.5 * dts_in[parent], 0.0)
    dtm_out = np.where(ps, 0.5 * dts_out[parent], 0.0)

    ray_p = seg.ray
    ray = ray_p[parent]
    v = seg.directions[ray]
    p = seg.origins[ray] + tm[:, None] * v
    tet = seg.tet[parent]
    tv = mesh.tets[tet]

    # normals: tet gradient inside, face-interpolated site gradients at the ends
    Bp = mesh.weight_gradients[seg.tet]
    g_tet = np.einsum("pij,pj->pi", Bp, sdf[mesh.tets[seg.tet]])
    n_tet, nt_norm, nt_ok = _normalize(g_tet)
    gs, vsum = site_gradients(mesh, sdf)
    g_in = np.einsum("pk,pkd->pd", seg.in_w, gs[seg.in_verts])
    g_out = np.einsum("pk,pkd->pd", seg.out_w, gs[seg.out_verts])
    n_in, ni_norm, ni_ok = _normalize(g_in)
    n_out, no_norm, no_ok = _normalize(g_out)
    n_all = np.concatenate([n_in, n_out, n_tet])
    na_idx = np.where(second, 2 * P + parent, parent)
    nb_idx = np.where(first_half, 2 * P + parent, P + parent)
    n_t = n_tet[parent]

    M = mesh.affine_inverse[tet]
    w = np.einsum("skd,sd->sk", M[:, :, :3], p) + M[:, :, 3]
    fc = np.einsum("sk,skf->sf", w, state.f_cse[tv])
    ff = np.einsum("sk,skf->sf", w, state.f_fine[tv])

    x_c = np.concatenate([p, v, sa[:, None], sb[:, None], n_t, fc], axis=1)
    col_geo, cache_c = mlp_forward(params.coarse, x_c)
    vn = np.sum(v * n_t, axis=1, keepdims=True)
    v_r = v - 2.0 * vn * n_t
    x_f = np.concatenate([p, v_r, col_geo, sa[:, None], sb[:, None], n_all[na_idx], n_all[nb_idx], ff], axis=1)
    col_fine, cache_f = mlp_forward(params.fine, x_f)

    alphas, da_a, da_b = alpha_terms(sa, sb, beta, cfg.literal_alpha)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(np.bincount(ray, minlength=n_rays), out=offsets[1:])
    C_geo, w_geo, trans, t_final = composite_batch(offsets, alphas, col_geo)
    C_fine, w_fine, _, _ = composite_batch(offsets, alphas, col_fine)
    out = RenderOutput(0.0, C_geo, C_fine, 1.0 - t_final, len(parent))
    if c_gt is None:
        return out

    loss, dCg, dCf = photometric_loss(C_geo, C_fine, c_gt, cfg.lam, cfg.eps)
    out.loss = loss
    d_alpha, d_col_geo = composite_backward(offsets, alphas, col_geo, w_geo, trans, dCg)
    d_alpha, d_col_fine = composite_backward(offsets, alphas, col_fine, w_fine, trans, dCf, d_alpha)

    dx_f, g_fine_net = mlp_backward(params.fine, cache_f, d_col_fine)
    d_col_geo = d_col_geo + dx_f[:, 6:9]
    dx_c, g_coarse_net = mlp_backward(params.coarse, cache_c, d_col_geo)

    d_p = dx_c[:, 0:3] + dx_f[:, 0:3]
    d_sa = dx_c[:, 6] + dx_f[:, 9] + d_alpha * da_a
    d_sb = dx_c[:, 7] + dx_f[:, 10] + d_alpha * da_b
    d_vr = dx_f[:, 3:6]
    d_nt = dx_c[:, 8:11] - 2.0 * (np.sum(d_vr * n_t, axis=1, keepdims=True) * v + vn * d_vr)
    d_nall = np.stack([np.bincount(na_idx, weights=dx_f[:, 11 + c], minlength=3 * P)
                       + np.bincount(nb_idx, weights=dx_f[:, 14 + c], minlength=3 * P) for c in range(3)], axis=1)
    d_fc = dx_c[:, 11:19]
    d_ff = dx_f[:, 17:25]

    grad_cse = _scatter_rows(tv, w, d_fc, n_sites)
    grad_fine = _scatter_rows(tv, w, d_ff, n_sites)
    # feature interpolation weights move with p
    Bs = mesh.weight_gradients[tet]
    d_w = np.einsum("skf,sf->sk", state.f_cse[tv], d_fc) + np.einsum("skf,sf->sk", state.f_fine[tv], d_ff)
    d_p += np.einsum("sdk,sk->sd", Bs, d_w)
    d_tm = np.sum(d_p * v, axis=1)

    d_sin = np.bincount(parent, weights=np.where(second, 0.0, d_sa) + d_tm * dtm_in, minlength=P)
    d_sout = np.bincount(parent, weights=np.where(first_half, 0.0, d_sb) + d_tm * dtm_out, minlength=P)

    grad_sdf = _scatter(seg.in_verts, seg.in_w * d_sin[:, None], n_sites)
    grad_sdf += _scatter(seg.out_verts, seg.out_w * d_sout[:, None], n_sites)

    d_ntet = d_nall[2 * P:] + np.stack([np.bincount(parent, weights=d_nt[:, d], minlength=P) for d in range(3)], axis=1)
    d_gtet = _normalize_bwd(n_tet, nt_norm, nt_ok, d_ntet)
    grad_sdf += _scatter(mesh.tets[seg.tet], np.einsum("pij,pi->pj", Bp, d_gtet), n_sites)

    d_gin = _normalize_bwd(n_in, ni_norm, ni_ok, d_nall[:P])
    d_gout = _normalize_bwd(n_out, no_norm, no_ok, d_nall[P:2 * P])
    d_gs = _scatter_rows(seg.in_verts, seg.in_w, d_gin, n_sites) + _scatter_rows(seg.out_verts, seg.out_w, d_gout, n_sites)
    grad_sdf += _site_gradients_bwd(mesh, vsum, d_gs)

    out.grad_sdf = grad_sdf
    out.grad_cse = grad_cse
    out.grad_fine = grad_fine
    out.grad_params = g_coarse_net + g_fine_net
    return out


def render_ray(mesh, state, params: NetworkParams, ray: Ray, cam_vertex: int, c_gt, beta: float,
               cfg: RenderConfig = None) -> RenderOutput:
    """Loss and gradients for a single ray."""
    return render_batch(mesh, state, params, ray.origin[None], ray.direction[None], [cam_vertex], beta,
                        cfg, None if c_gt is None else np.asarray(c_gt, dtype=np.float64)[None])
