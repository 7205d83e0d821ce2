"""Surface extraction by marching tetrahedra and mesh-to-mesh distances."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .geom import TET_EDGES, TetMesh

DEFAULT_CLIP = 0.1


class EmptyMeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def normals(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.normals(), axis=1)

    def degenerate(self, tol: float = 1e-12) -> np.ndarray:
        return self.areas() <= tol

    def edge_counts(self):
        """Unique undirected edges and how many triangles use each."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def is_closed(self) -> bool:
        if len(self.triangles) == 0:
            return False
        _, counts = self.edge_counts()
        return bool(np.all(counts == 2))


# -- marching tetrahedra ----------------------------------------------------

def _build_tables():
    edge_id = {}
    for k, (a, b) in enumerate(TET_EDGES):
        edge_id[(a, b)] = edge_id[(b, a)] = k
    n_tri = np.zeros(16, dtype=np.int64)
    tri_edges = np.full((16, 2, 3), -1, dtype=np.int64)
    for code in range(16):
        neg = [i for i in range(4) if code >> i & 1]
        pos = [i for i in range(4) if not code >> i & 1]
        if len(neg) in (1, 3):
            lone = neg[0] if len(neg) == 1 else pos[0]
            others = [i for i in range(4) if i != lone]
            tri_edges[code, 0] = [edge_id[(lone, j)] for j in others]
            n_tri[code] = 1
        elif len(neg) == 2:
            a, b = neg
            c, d = pos
            ac, ad, bd, bc = edge_id[(a, c)], edge_id[(a, d)], edge_id[(b, d)], edge_id[(b, c)]
            tri_edges[code, 0] = [ac, ad, bd]
            tri_edges[code, 1] = [ac, bd, bc]
            n_tri[code] = 2
    return n_tri, tri_edges


_N_TRI, _TRI_EDGES = _build_tables()


def marching_tetrahedra(mesh: TetMesh, sdf, exclude=None) -> TriMesh:
    """Zero level set of the piecewise linear SDF.

    Sites with sdf == 0 count as positive. Tets touching a site flagged in
    ``exclude`` (boolean per site) are skipped. Triangles face toward
    increasing SDF; shared crossing points are merged by edge key.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    if not np.all(np.isfinite(sdf)):
        raise ValueError("sdf must be finite")
    tets = mesh.tets
    if exclude is not None:
        tets = tets[~np.any(np.asarray(exclude, dtype=bool)[tets], axis=1)]
    neg = sdf[tets] < 0.0
    code = (neg * (1 << np.arange(4))).sum(axis=1)
    n_tri = _N_TRI[code]
    if not np.any(n_tri):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    rows = np.repeat(np.arange(len(tets)), n_tri)
    which = np.concatenate([np.arange(k) for k in n_tri[n_tri > 0]])
    local = _TRI_EDGES[code[rows], which]  # (F, 3) tet-edge indices
    ends = np.take_along_axis(tets[rows], TET_EDGES[local].reshape(-1, 6), axis=1).reshape(-1, 3, 2)
    keys = np.sort(ends, axis=2).reshape(-1, 2)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    a, b = uniq[:, 0], uniq[:, 1]
    sa, sb = sdf[a], sdf[b]
    t = sa / (sa - sb)
    P = mesh.positions
    verts = P[a] + t[:, None] * (P[b] - P[a])
    tris = inv.reshape(-1, 3)
    # orient toward positive sdf using the tet gradient
    B = mesh.weight_gradients
    if exclude is not None:
        keep_ids = np.nonzero(~np.any(np.asarray(exclude, dtype=bool)[mesh.tets], axis=1))[0]
        B = B[keep_ids]
    grad = np.einsum("fij,fj->fi", B[rows], sdf[tets[rows]])
    c = verts[tris]
    nrm = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    flip = np.sum(nrm * grad, axis=1) < 0.0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return TriMesh(verts, tris)


# -- point to triangle distance ---------------------------------------------

@nb.njit(cache=True)
def _pt_tri_sq(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    # closest point on triangle, Voronoi-region walk
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx, qy, qz = apx - v * abx, apy - v * aby, apz - v * abz
        return qx * qx + qy * qy + qz * qz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx, qy, qz = apx - w * acx, apy - w * acy, apz - w * acz
        return qx * qx + qy * qy + qz * qz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bpx - w * (cx - bx)
        qy = bpy - w * (cy - by)
        qz = bpz - w * (cz - bz)
        return qx * qx + qy * qy + qz * qz
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = apx - abx * v - acx * w
    qy = apy - aby * v - acy * w
    qz = apz - abz * v - acz * w
    return qx * qx + qy * qy + qz * qz


@nb.njit(cache=True)
def _tri_sq(p, V, T, t):
    a, b, c = T[t, 0], T[t, 1], T[t, 2]
    return _pt_tri_sq(p[0], p[1], p[2], V[a, 0], V[a, 1], V[a, 2],
                      V[b, 0], V[b, 1], V[b, 2], V[c, 0], V[c, 1], V[c, 2])


@nb.njit(cache=True)
def _brute(points, V, T, out):
    for i in range(points.shape[0]):
        best = np.inf
        for t in range(T.shape[0]):
            d = _tri_sq(points[i], V, T, t)
            if d < best:
                best = d
        out[i] = math.sqrt(best)


@nb.njit(cache=True)
def _grid_fill(V, T, lo, h, dims, counts_only, offsets, cells):
    fill = np.zeros(dims[0] * dims[1] * dims[2], dtype=np.int64)
    for t in range(T.shape[0]):
        i0 = np.empty(3, np.int64)
        i1 = np.empty(3, np.int64)
        for d in range(3):
            mn = min(V[T[t, 0], d], V[T[t, 1], d], V[T[t, 2], d])
            mx = max(V[T[t, 0], d], V[T[t, 1], d], V[T[t, 2], d])
            i0[d] = min(max(int((mn - lo[d]) / h), 0), dims[d] - 1)
            i1[d] = min(max(int((mx - lo[d]) / h), 0), dims[d] - 1)
        for x in range(i0[0], i1[0] + 1):
            for y in range(i0[1], i1[1] + 1):
                for z in range(i0[2], i1[2] + 1):
                    c = (x * dims[1] + y) * dims[2] + z
                    if counts_only:
                        fill[c] += 1
                    else:
                        cells[offsets[c] + fill[c]] = t
                        fill[c] += 1
    return fill


@nb.njit(cache=True)
def _cell_tris(p, V, T, offsets, cells, c, best):
    for q in range(offsets[c], offsets[c + 1]):
        d2 = _tri_sq(p, V, T, cells[q])
        if d2 < best:
            best = d2
    return best


@nb.njit(cache=True, parallel=True)
def _grid_query(points, V, T, lo, h, dims, offsets, cells, max_dist, out):
    for i in nb.prange(points.shape[0]):
        p = points[i]
        c0 = np.empty(3, np.int64)
        for d in range(3):
            c0[d] = min(max(int(math.floor((p[d] - lo[d]) / h)), 0), dims[d] - 1)
        best = max_dist * max_dist
        r = 0
        while True:
            x0, x1 = max(c0[0] - r, 0), min(c0[0] + r, dims[0] - 1)
            y0, y1 = max(c0[1] - r, 0), min(c0[1] + r, dims[1] - 1)
            for x in range(x0, x1 + 1):
                ex = abs(x - c0[0]) == r
                for y in range(y0, y1 + 1):
                    base = (x * dims[1] + y) * dims[2]
                    if ex or abs(y - c0[1]) == r:
                        for z in range(max(c0[2] - r, 0), min(c0[2] + r, dims[2] - 1) + 1):
                            best = _cell_tris(p, V, T, offsets, cells, base + z, best)
                    else:
                        if c0[2] - r >= 0:
                            best = _cell_tris(p, V, T, offsets, cells, base + c0[2] - r, best)
                        if r > 0 and c0[2] + r < dims[2]:
                            best = _cell_tris(p, V, T, offsets, cells, base + c0[2] + r, best)
            # distance from p to the nearest cell outside the visited box
            bound = np.inf
            for d in range(3):
                if c0[d] - r > 0:
                    bound = min(bound, p[d] - (lo[d] + (c0[d] - r) * h))
                if c0[d] + r < dims[d] - 1:
                    bound = min(bound, lo[d] + (c0[d] + r + 1) * h - p[d])
            if bound == np.inf:
                break
            if bound > 0.0 and best <= bound * bound:
                break
            r += 1
        out[i] = math.sqrt(best)


class TriangleGrid:
    """Uniform bucket grid over triangles for exact nearest-distance queries."""

    def __init__(self, mesh: TriMesh, cell_scale: float = 1.5):
        if len(mesh.triangles) == 0:
            raise EmptyMeshError("mesh has no triangles")
        self.V = mesh.vertices
        self.T = mesh.triangles
        used = self.V[np.unique(self.T)]
        self.lo = used.min(axis=0)
        ext = np.maximum(used.max(axis=0) - self.lo, 1e-12)
        c = self.V[self.T]
        edge = float(np.mean(np.linalg.norm(c[:, 1] - c[:, 0], axis=1)))
        self.h = float(max(cell_scale * edge, ext.max() / 256.0, 1e-12))
        self.dims = np.maximum(np.ceil(ext / self.h).astype(np.int64), 1)
        dummy = np.zeros(1, np.int64)
        counts = _grid_fill(self.V, self.T, self.lo, self.h, self.dims, True, dummy, dummy)
        self.offsets = np.zeros(len(counts) + 1, dtype=np.int64)
        np.cumsum(counts, out=self.offsets[1:])
        self.cells = np.empty(self.offsets[-1], dtype=np.int64)
        _grid_fill(self.V, self.T, self.lo, self.h, self.dims, False, self.offsets, self.cells)

    def distance(self, points, max_dist: float = np.inf) -> np.ndarray:
        """Exact distances, capped at ``max_dist``."""
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        _grid_query(points, self.V, self.T, self.lo, self.h, self.dims, self.offsets, self.cells,
                    float(max_dist), out)
        return out


@nb.njit(cache=True, parallel=True)
def _candidate_min(points, V, T, cand, out):
    for i in nb.prange(points.shape[0]):
        best = np.inf
        for j in range(cand.shape[1]):
            d2 = _tri_sq(points[i], V, T, cand[i, j])
            if d2 < best:
                best = d2
        out[i] = math.sqrt(best)


class CentroidIndex:
    """KD-tree over triangle centroids with a certified exact search.

    A triangle whose centroid lies farther than ``best + R`` from the query
    (R the largest centroid-to-corner radius) cannot beat ``best``.
    """

    def __init__(self, mesh: TriMesh):
        if len(mesh.triangles) == 0:
            raise EmptyMeshError("mesh has no triangles")
        self.V = mesh.vertices
        self.T = mesh.triangles
        c = mesh.corners
        cen = c.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(c - cen[:, None], axis=2)))
        self.tree = cKDTree(cen)

    def distance(self, points) -> np.ndarray:
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        k = min(16, len(self.T))
        dc, idx = self.tree.query(points, k=k)
        dc = dc.reshape(len(points), k)
        idx = np.ascontiguousarray(idx.reshape(len(points), k), dtype=np.int64)
        out = np.empty(len(points))
        _candidate_min(points, self.V, self.T, idx, out)
        if k < len(self.T):
            todo = np.nonzero(dc[:, -1] < out + self.radius)[0]
            for i in todo:
                cand = np.asarray(self.tree.query_ball_point(points[i], out[i] + self.radius), dtype=np.int64)
                res = np.empty(1)
                _candidate_min(points[i:i + 1], self.V, self.T, cand[None], res)
                out[i] = min(out[i], res[0])
        return out


def point_to_mesh(p, mesh: TriMesh, max_dist: float = np.inf):
    """Exact point-to-triangle-mesh distance (scalar for one point, array for many),
    capped at ``max_dist``."""
    pts = np.asarray(p, dtype=np.float64)
    d = np.minimum(CentroidIndex(mesh).distance(pts), max_dist)
    return float(d[0]) if pts.ndim == 1 else d


def point_to_mesh_brute(points, mesh: TriMesh) -> np.ndarray:
    if len(mesh.triangles) == 0:
        raise EmptyMeshError("mesh has no triangles")
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(points))
    _brute(points, mesh.vertices, mesh.triangles, out)
    return out


# -- chamfer ----------------------------------------------------------------

def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples from a counter-based stream."""
    if len(mesh.triangles) == 0:
        raise EmptyMeshError("mesh has no triangles")
    rng = np.random.Generator(np.random.Philox(key=seed))
    area = mesh.areas()
    cdf = np.cumsum(area)
    if cdf[-1] <= 0:
        raise EmptyMeshError("mesh has zero area")
    tri = np.minimum(np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right"), len(area) - 1)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    c = mesh.corners[tri]
    return c[:, 0] + u[:, None] * (c[:, 1] - c[:, 0]) + v[:, None] * (c[:, 2] - c[:, 0])


def _distances_to(target, points, clip):
    if isinstance(target, TriMesh):
        return TriangleGrid(target).distance(points, clip)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(target) == 0:
        raise EmptyMeshError("empty point sample")
    return np.minimum(cKDTree(target).query(points)[0], clip)


def chamfer(gt, pred: TriMesh, clip: float = DEFAULT_CLIP, n_samples: int = 1_000_000, seed: int = 0):
    """(Acc, Compl): clipped mean distances from gt samples to pred and back.

    ``gt`` may be a TriMesh or an (n, 3) point sample used as is.
    """
    if isinstance(gt, TriMesh):
        gt_pts = sample_surface(gt, n_samples, seed)
    else:
        gt_pts = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
        if len(gt_pts) == 0:
            raise EmptyMeshError("empty point sample")
    pred_pts = sample_surface(pred, n_samples, seed + 1)
    acc = float(np.mean(np.minimum(_distances_to(pred, gt_pts, clip), clip)))
    compl = float(np.mean(np.minimum(_distances_to(gt, pred_pts, clip), clip)))
    return acc, compl


# -- file formats -----------------------------------------------------------

def write_ply(path, mesh: TriMesh) -> None:
    """Binary little-endian PLY with double vertices and int32 indices."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(faces.tobytes())


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
              "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
              "float": "f4", "float32": "f4", "double": "f8", "float64": "f8"}


def read_ply(path) -> TriMesh:
    """Binary little-endian PLY; extra vertex properties are skipped, faces
    are fan-triangulated."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary_little_endian PLY is supported")
    elements = []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], "scalar", _PLY_TYPES[tok[1]], None))
    pos = body_start
    verts = np.zeros((0, 3))
    tris = np.zeros((0, 3), dtype=np.int64)
    for name, count, props in elements:
        if all(kind == "scalar" for _, kind, _, _ in props):
            dt = np.dtype([(p, "<" + t) for p, _, t, _ in props])
            arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
            pos += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
        elif name == "face" and len(props) == 1:
            _, _, ct, it = props[0]
            ct, it = np.dtype("<" + ct), np.dtype("<" + it)
            if count and int(np.frombuffer(raw, ct, 1, pos)[0]) == 3:
                dt = np.dtype([("n", ct), ("i", it, (3,))])
                arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos)
                if np.all(arr["n"] == 3):
                    tris = arr["i"].astype(np.int64)
                    pos += dt.itemsize * count
                    continue
            out = []
            for _ in range(count):
                n = int(np.frombuffer(raw, ct, 1, pos)[0])
                pos += ct.itemsize
                idx = np.frombuffer(raw, it, n, pos).astype(np.int64)
                pos += it.itemsize * n
                out.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1))
            tris = np.asarray(out, dtype=np.int64).reshape(-1, 3)
        else:
            raise ValueError(f"{path}: unsupported element layout for '{name}'")
    return TriMesh(verts, tris)


def read_obj(path) -> TriMesh:
    verts, tris = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(re.split("/", t)[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                tris.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def read_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise ValueError(f"{path}: unknown mesh format '{suffix}'")
