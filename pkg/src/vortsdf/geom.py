"""Geometry kernel: sites, KD-tree queries, Delaunay tetrahedralization and
the compact adjacency-linked tetrahedral mesh used for ray marching."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

FREE = 0
CAMERA = 1

BOUNDARY = -1  # all-ones neighbor word

# Face k is opposite vertex k, listed so its normal points out of a positively
# oriented tet.
FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)

TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


class GeometryError(ValueError):
    """Raised on degenerate or ill-formed geometric input."""


@dataclass
class SiteSet:
    positions: np.ndarray
    kind: np.ndarray = None
    level: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.kind is None:
            self.kind = np.zeros(len(self.positions), dtype=np.int8)
        self.kind = np.asarray(self.kind, dtype=np.int8)
        if len(self.kind) != len(self.positions):
            raise GeometryError("kind and positions length differ")
        if not np.all(np.isfinite(self.positions)):
            raise GeometryError("site positions must be finite")

    def __len__(self):
        return len(self.positions)

    @property
    def free(self) -> np.ndarray:
        return self.kind == FREE

    @property
    def camera(self) -> np.ndarray:
        return self.kind == CAMERA

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.positions.max(0) - self.positions.min(0)))

    def copy(self) -> "SiteSet":
        return SiteSet(self.positions.copy(), self.kind.copy(), self.level)


def pack_neighbor(tet: np.ndarray, slot: np.ndarray) -> np.ndarray:
    return (np.asarray(tet, dtype=np.int64) << 2) | np.asarray(slot, dtype=np.int64)


def unpack_neighbor(word):
    """Split a neighbor word into (tet id, face slot). Boundary gives (-1, 3)."""
    word = np.asarray(word, dtype=np.int64)
    return word >> 2, word & 3


@dataclass
class TetMesh:
    """Positively oriented tetrahedra with face-adjacency words.

    ``neighbors[t, k]`` encodes the tet across face k (opposite vertex k) as
    ``(tet_id << 2) | slot`` where slot is the index of the same face in the
    neighbor, or ``BOUNDARY`` on the hull.
    """

    positions: np.ndarray
    tets: np.ndarray
    neighbors: np.ndarray
    edges: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.edges is None:
            self.edges = unique_edges(self.tets)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def vertex_tets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR incidence (offsets, tet ids) from vertex to incident tets."""
        n = len(self.positions)
        flat = self.tets.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=n)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return offsets, (order // 4).astype(np.int64)

    @cached_property
    def affine_inverse(self) -> np.ndarray:
        """Per-tet 4x4 matrix M with barycentric(p) = M @ [p, 1]."""
        return tet_affine_inverse(self.positions, self.tets)

    @cached_property
    def weight_gradients(self) -> np.ndarray:
        """Per-tet (3, 4) matrix whose columns are the spatial gradients of the
        four barycentric weights, so grad(sdf) = B @ sdf[tet]."""
        return np.ascontiguousarray(np.transpose(self.affine_inverse[:, :, :3], (0, 2, 1)))

    @cached_property
    def volumes(self) -> np.ndarray:
        return orient3d(*(self.positions[self.tets[:, k]] for k in range(4))) / 6.0


class KdTree:
    """Balanced KD-tree over a frozen snapshot of site positions."""

    def __init__(self, positions: np.ndarray):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) == 0:
            raise GeometryError("cannot build a KD-tree over zero sites")
        self.positions = positions.copy()
        self._tree = cKDTree(self.positions, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.positions)

    def query(self, points, k):
        return self._tree.query(points, k=k)


def build_kdtree(sites) -> KdTree:
    positions = sites.positions if isinstance(sites, SiteSet) else sites
    return KdTree(positions)


def knn(tree: KdTree, query, k: int) -> np.ndarray:
    """Indices of the k nearest sites to ``query`` in ascending distance.

    A site that coincides with the query point is excluded, so querying at a
    site returns its k nearest *other* sites.
    """
    n = len(tree)
    if k > n:
        raise GeometryError(f"k={k} exceeds site count {n}")
    query = np.asarray(query, dtype=np.float64)
    kk = min(k + 1, n)
    dist, idx = tree.query(query, k=kk)
    dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
    keep = dist > 0.0
    out = idx[keep][:k]
    if len(out) < k:
        raise GeometryError(f"k={k} exceeds the number of other sites ({n - 1})")
    return out


def knn_table(tree: KdTree, k: int) -> np.ndarray:
    """(n, k) table of each site's k nearest other sites."""
    n = len(tree)
    if k >= n:
        raise GeometryError(f"k={k} needs at least {k + 1} sites, got {n}")
    _, idx = tree.query(tree.positions, k=k + 1)
    # Sites never coincide, so column 0 is the site itself.
    return np.ascontiguousarray(idx[:, 1:], dtype=np.int32)


def orient3d(a, b, c, d) -> np.ndarray:
    """det[b-a, c-a, d-a]; positive when (a, b, c, d) is positively oriented."""
    return np.einsum("...i,...i->...", np.cross(b - a, c - a), d - a)


def insphere(a, b, c, d, e) -> np.ndarray:
    """Positive when e lies strictly inside the circumsphere of positively
    oriented (a, b, c, d). Uses the lifted 4x4 determinant relative to e."""
    rows = []
    for p in (a, b, c, d):
        q = p - e
        rows.append(np.concatenate([q, np.sum(q * q, axis=-1, keepdims=True)], axis=-1))
    m = np.stack(rows, axis=-2)
    return -np.linalg.det(m)


def delaunay(sites, tol: float = 1e-12) -> TetMesh:
    """Delaunay tetrahedralization of the convex hull of the sites.

    Qhull's triangulated output contains flat tets on cospherical input such
    as a perfect lattice. When any tet has |6V| below ``tol * diag**3`` the
    ties are broken by a tiny fixed pseudo-random perturbation of the lifted
    paraboloid, which yields a flat-free regular triangulation that is still
    Delaunay for the unperturbed sites.
    """
    positions = sites.positions if isinstance(sites, SiteSet) else np.asarray(sites, dtype=np.float64)
    if len(positions) < 4:
        raise GeometryError("delaunay needs at least 4 sites")
    diag = float(np.linalg.norm(positions.max(0) - positions.min(0)))
    try:
        tets = Delaunay(positions).simplices.astype(np.int64)
    except QhullError as exc:
        raise GeometryError(f"degenerate site configuration: {exc.args[0].splitlines()[0]}") from exc
    vol = _orient_tets(positions, tets)
    # Qhull may merge a too-small perturbation away; grow it until no tie survives
    for eps in (1e-9, 1e-7, 1e-5):
        if not np.any(vol <= tol * diag**3):
            return build_adjacency(tets, positions)
        tets = _perturbed_lift_delaunay(positions, diag, eps)
        vol = _orient_tets(positions, tets)
    if np.any(vol <= tol * diag**3):
        raise GeometryError("could not remove flat tets from the triangulation")
    return build_adjacency(tets, positions)


def _perturbed_lift_delaunay(positions, diag, eps=1e-9):
    centered = positions - positions.mean(0)
    heights = np.random.default_rng(0x5EED).random(len(positions))
    lifted = np.c_[centered, np.sum(centered**2, axis=1) + eps * diag**2 * heights]
    hull = ConvexHull(lifted)
    return hull.simplices[hull.equations[:, 3] < 0].astype(np.int64)


def _orient_tets(positions, tets):
    vol = orient3d(*(positions[tets[:, k]] for k in range(4)))
    neg = vol < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3].copy(), tets[neg, 2].copy()
    return np.abs(vol)


def build_adjacency(tets, positions) -> TetMesh:
    """Link tets across shared faces; hull faces get ``BOUNDARY``."""
    tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
    n = len(tets)
    neighbors = np.full((n, 4), BOUNDARY, dtype=np.int64)
    if n:
        faces = np.sort(tets[:, FACES].reshape(-1, 3), axis=1)
        keys, inverse, counts = np.unique(faces, axis=0, return_inverse=True, return_counts=True)
        if np.any(counts > 2):
            bad = keys[np.argmax(counts)]
            raise GeometryError(f"non-manifold face {tuple(int(v) for v in bad)} shared by >2 tets")
        inverse = inverse.ravel()
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        pair = np.nonzero(inv_sorted[1:] == inv_sorted[:-1])[0]
        a, b = order[pair], order[pair + 1]
        neighbors.reshape(-1)[a] = pack_neighbor(b // 4, b % 4)
        neighbors.reshape(-1)[b] = pack_neighbor(a // 4, a % 4)
    return TetMesh(np.asarray(positions, dtype=np.float64), tets, neighbors)


def unique_edges(tets) -> np.ndarray:
    e = np.sort(np.asarray(tets)[:, TET_EDGES].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0)


def tet_affine_inverse(positions, tets) -> np.ndarray:
    v = positions[tets]  # (T, 4, 3)
    a = np.concatenate([np.transpose(v, (0, 2, 1)), np.ones((len(tets), 1, 4))], axis=1)
    return np.linalg.inv(a)


def barycentric(verts, p, tol: float = 1e-14) -> np.ndarray:
    """Weights w (sum 1) with sum_i w_i verts[i] == p."""
    verts = np.asarray(verts, dtype=np.float64)
    e = (verts[1:] - verts[0]).T
    det = np.linalg.det(e)
    scale = max(np.max(np.linalg.norm(verts[1:] - verts[0], axis=1)), 1e-300)
    if abs(det) <= tol * scale**3:
        raise GeometryError("degenerate tetrahedron")
    w = np.linalg.solve(e, np.asarray(p, dtype=np.float64) - verts[0])
    return np.concatenate([[1.0 - w.sum()], w])


def dump_tets_ply(mesh: TetMesh, path) -> None:
    """Debug dump: every tet exploded into its four faces."""
    from .extract import TriMesh, write_ply

    tris = mesh.tets[:, FACES].reshape(-1, 3)
    used, inv = np.unique(tris, return_inverse=True)
    write_ply(path, TriMesh(mesh.positions[used], inv.reshape(-1, 3)))
