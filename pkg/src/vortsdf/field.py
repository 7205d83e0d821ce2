"""Discrete SDF and feature fields stored on CVT sites.

Covers interpolation inside tets, per-tet SDF gradients, the normal-smoothing
and total-variation regularizers with their analytic gradients, surface
adaptive up-sampling, and the binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .geom import CAMERA, FACES, GeometryError, SiteSet, TetMesh, barycentric

N_FEATURES = 8
CHECKPOINT_MAGIC = b"VSDF"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


@dataclass
class FieldState:
    sdf: np.ndarray
    f_cse: np.ndarray
    f_fine: np.ndarray
    adam_state: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sdf)
        if self.f_cse.shape != (n, N_FEATURES) or self.f_fine.shape != (n, N_FEATURES):
            raise ValueError("feature arrays must be (n_sites, 8)")

    def __len__(self):
        return len(self.sdf)

    def copy(self) -> "FieldState":
        return FieldState(self.sdf.copy(), self.f_cse.copy(), self.f_fine.copy())


@dataclass
class RegWeights:
    w_reg: float = 0.1
    w_tv: float = 0.01
    lam: float = 1.0
    eps: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.w_reg < 0 or self.w_tv < 0:
            raise ValueError("regularization weights must be non-negative")


def init_field(sites: SiteSet, bbox, seed: int = 0) -> FieldState:
    """Sphere SDF (radius a quarter of the bbox diagonal) and small random features."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    center = 0.5 * (lo + hi)
    radius = 0.25 * float(np.linalg.norm(hi - lo))
    sdf = np.linalg.norm(sites.positions - center, axis=1) - radius
    rng = np.random.default_rng(seed)
    n = len(sites)
    f_cse = rng.uniform(-1e-2, 1e-2, (n, N_FEATURES))
    f_fine = rng.uniform(-1e-2, 1e-2, (n, N_FEATURES))
    return FieldState(sdf, f_cse, f_fine)


def face_sdf(face, bary, sdf) -> float:
    return float(np.dot(np.asarray(bary, dtype=np.float64), np.asarray(sdf)[np.asarray(face)]))


def tet_features(mesh: TetMesh, tet: int, p, state: FieldState):
    """Barycentric interpolation of both feature sets at ``p`` inside ``tet``."""
    verts = mesh.tets[tet]
    w = barycentric(mesh.positions[verts], p)
    return w @ state.f_cse[verts], w @ state.f_fine[verts]


def tet_sdf_gradient(verts, sdf4, tol: float = 1e-14) -> np.ndarray:
    """Constant gradient of the linear interpolant of ``sdf4`` over the tet."""
    verts = np.asarray(verts, dtype=np.float64)
    sdf4 = np.asarray(sdf4, dtype=np.float64)
    e = verts[1:] - verts[0]
    scale = max(float(np.max(np.linalg.norm(e, axis=1))), 1e-300)
    if abs(np.linalg.det(e)) <= tol * scale**3:
        raise GeometryError("degenerate tetrahedron")
    return np.linalg.solve(e, sdf4[1:] - sdf4[0])


def tet_gradients(mesh: TetMesh, sdf, tets=None) -> np.ndarray:
    """Vectorized per-tet SDF gradients, (T, 3)."""
    idx = slice(None) if tets is None else tets
    return np.einsum("tij,tj->ti", mesh.weight_gradients[idx], np.asarray(sdf)[mesh.tets[idx]])


def smoothing_matrix(knn, positions) -> sp.csr_matrix:
    """Row-normalized Gaussian weights over each site and its k neighbors.

    The bandwidth of site i is its mean neighbor distance.
    """
    knn = np.asarray(knn)
    n = len(positions)
    if knn.size == 0:
        return sp.identity(n, format="csr")
    d = np.linalg.norm(positions[knn] - positions[:, None, :], axis=2)
    sigma = np.maximum(d.mean(axis=1), 1e-300)
    w = np.exp(-(d**2) / (2.0 * sigma[:, None] ** 2))
    cols = np.concatenate([np.arange(n)[:, None], knn], axis=1)
    vals = np.concatenate([np.ones((n, 1)), w], axis=1)
    vals /= vals.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(n), cols.shape[1])
    return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(n, n))


def knn_smooth(sdf, knn, positions) -> np.ndarray:
    return smoothing_matrix(knn, positions) @ np.asarray(sdf, dtype=np.float64)


def normal_smoothing(sdf, mesh: TetMesh, smoother, tets=None, detach: bool = False):
    """Loss 0.5 * sum_t (1 - cos^2(grad sdf_t, grad smooth_t)) and d/d sdf.

    ``smoother`` is the matrix from :func:`smoothing_matrix` (or a knn table,
    from which it is built). ``tets`` restricts the sum to a subset. Tets where
    either gradient vanishes contribute nothing. With ``detach`` the smoothed
    field is treated as a constant.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    if not sp.issparse(smoother):
        smoother = smoothing_matrix(smoother, mesh.positions)
    tets = np.arange(mesh.n_tets) if tets is None else np.asarray(tets)
    B = mesh.weight_gradients[tets]
    vid = mesh.tets[tets]
    smooth = smoother @ sdf
    g = np.einsum("tij,tj->ti", B, sdf[vid])
    h = np.einsum("tij,tj->ti", B, smooth[vid])
    ng = np.linalg.norm(g, axis=1)
    nh = np.linalg.norm(h, axis=1)
    ok = (ng > 1e-12) & (nh > 1e-12)
    ng_s = np.where(ok, ng, 1.0)
    nh_s = np.where(ok, nh, 1.0)
    cos = np.where(ok, np.einsum("ti,ti->t", g, h) / (ng_s * nh_s), 0.0)
    loss = 0.5 * float(np.sum(np.where(ok, 1.0 - cos**2, 0.0)))
    dcos = np.where(ok, -cos, 0.0)[:, None]
    dg = dcos * (h / (ng_s * nh_s)[:, None] - cos[:, None] * g / (ng_s**2)[:, None])
    grad = _scatter_tet(vid, np.einsum("tij,ti->tj", B, dg), len(sdf))
    if not detach:
        dh = dcos * (g / (ng_s * nh_s)[:, None] - cos[:, None] * h / (nh_s**2)[:, None])
        grad += smoother.T @ _scatter_tet(vid, np.einsum("tij,ti->tj", B, dh), len(sdf))
    return loss, grad


def _scatter_tet(vid, vals, n):
    return np.bincount(vid.ravel(), weights=vals.ravel(), minlength=n).astype(np.float64)


def tv_loss(sdf, positions, edges):
    """sum over edges of (sdf_i - sdf_j)^2 / |s_i - s_j| and its gradient."""
    sdf = np.asarray(sdf, dtype=np.float64)
    edges = np.asarray(edges).reshape(-1, 2)
    length = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
    if np.any(length <= 0.0):
        raise GeometryError("zero-length edge in total variation")
    diff = sdf[edges[:, 0]] - sdf[edges[:, 1]]
    loss = float(np.sum(diff**2 / length))
    ge = 2.0 * diff / length
    n = len(sdf)
    grad = np.bincount(edges[:, 0], weights=ge, minlength=n) - np.bincount(edges[:, 1], weights=ge, minlength=n)
    return loss, grad


def combine_sdf_gradient(g_rgb, g_reg, g_tv, weights: RegWeights) -> np.ndarray:
    g_rgb, g_reg, g_tv = (np.asarray(g, dtype=np.float64) for g in (g_rgb, g_reg, g_tv))
    if not (g_rgb.shape == g_reg.shape == g_tv.shape):
        raise ValueError("gradient arrays differ in length")
    return g_rgb + weights.w_reg * g_reg + weights.w_tv * g_tv


def upsample_edges(mesh: TetMesh, sites: SiteSet, sdf, ratio: float = 1.5) -> np.ndarray:
    """Edges that get a midpoint: sign change, or min |sdf| below ``ratio`` x length.

    Edges touching a camera site never qualify.
    """
    e = mesh.edges
    s0, s1 = sdf[e[:, 0]], sdf[e[:, 1]]
    length = np.linalg.norm(sites.positions[e[:, 0]] - sites.positions[e[:, 1]], axis=1)
    near = np.minimum(np.abs(s0), np.abs(s1)) < ratio * length
    keep = (s0 * s1 < 0) | near
    keep &= (sites.kind[e[:, 0]] != CAMERA) & (sites.kind[e[:, 1]] != CAMERA)
    return e[keep]


def upsample(mesh: TetMesh, sites: SiteSet, state: FieldState, ratio: float = 1.5):
    """Insert a site at the midpoint of every qualifying Delaunay edge.

    New sites inherit the endpoint averages of SDF and features. Returns the
    grown site set (level + 1) and field.
    """
    e = upsample_edges(mesh, sites, state.sdf, ratio)
    a, b = e[:, 0], e[:, 1]
    new_pos = 0.5 * (sites.positions[a] + sites.positions[b])
    positions = np.concatenate([sites.positions, new_pos])
    kind = np.concatenate([sites.kind, np.zeros(len(e), dtype=np.int8)])
    grown = FieldState(
        np.concatenate([state.sdf, 0.5 * (state.sdf[a] + state.sdf[b])]),
        np.concatenate([state.f_cse, 0.5 * (state.f_cse[a] + state.f_cse[b])]),
        np.concatenate([state.f_fine, 0.5 * (state.f_fine[a] + state.f_fine[b])]),
    )
    return SiteSet(positions, kind, sites.level + 1), grown


def resample(old_positions, state: FieldState, new_positions) -> FieldState:
    """Transfer the field to moved sites by linear interpolation over the
    Delaunay tets of the old positions; points outside the old hull take
    their nearest old site's values."""
    old = np.asarray(old_positions, dtype=np.float64)
    new = np.asarray(new_positions, dtype=np.float64)
    tri = Delaunay(old)
    simplex = tri.find_simplex(new)
    inside = simplex >= 0
    T = tri.transform[simplex[inside]]
    b = np.einsum("nij,nj->ni", T[:, :3], new[inside] - T[:, 3])
    w = np.c_[b, 1.0 - b.sum(axis=1)]
    idx = tri.simplices[simplex[inside]]
    out = []
    for vals in (state.sdf[:, None], state.f_cse, state.f_fine):
        v = np.empty((len(new), vals.shape[1]))
        v[inside] = np.einsum("nk,nkf->nf", w, vals[idx])
        if not np.all(inside):
            v[~inside] = vals[cKDTree(old).query(new[~inside])[1]]
        out.append(v)
    return FieldState(out[0][:, 0], out[1], out[2])


def face_vertices(mesh: TetMesh, tet, slot) -> np.ndarray:
    return mesh.tets[tet][FACES[slot]]


def save_checkpoint(path, sites: SiteSet, state: FieldState) -> None:
    n = len(sites)
    body = np.empty((n, 20), dtype="<f4")
    body[:, 0:3] = sites.positions
    body[:, 3] = state.sdf
    body[:, 4:12] = state.f_cse
    body[:, 12:20] = state.f_fine
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, n, sites.level))
        fh.write(body.tobytes())


def load_checkpoint(path):
    """Returns (positions, level, FieldState). Site kinds are not stored."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, n, level = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    expected = _HEADER.size + n * 80
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, 20).astype(np.float64)
    state = FieldState(body[:, 3].copy(), body[:, 4:12].copy(), body[:, 12:20].copy())
    return body[:, 0:3].copy(), level, state
