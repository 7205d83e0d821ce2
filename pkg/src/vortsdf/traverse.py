"""Ray marching through the tetrahedral mesh, seeded at camera vertices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .geom import FACES, TetMesh

DEFAULT_CAP = 1024

OK = 0
GRAZING = 1
CYCLE = 2

_CONTAIN_EPS = 1e-12


class TraversalError(RuntimeError):
    """Raised when a walk revisits space, which means broken adjacency."""


class GrazingRay(RuntimeError):
    """The exit face is ambiguous (ray through an edge or vertex)."""


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")


@dataclass
class SegmentList:
    """Segments of one or more rays, stored flat in ray order.

    Per segment: tet id, entry/exit face slot (-1 entry means the walk started
    at the camera vertex), ray parameters, and the three vertex ids and
    barycentric weights locating the entry and exit points on their faces.
    """

    origins: np.ndarray
    directions: np.ndarray
    offsets: np.ndarray
    tet: np.ndarray
    entry_slot: np.ndarray
    exit_slot: np.ndarray
    t_in: np.ndarray
    t_out: np.ndarray
    in_verts: np.ndarray
    in_w: np.ndarray
    out_verts: np.ndarray
    out_w: np.ndarray

    def __len__(self):
        return len(self.tet)

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    @property
    def ray(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rays), np.diff(self.offsets))

    @property
    def in_points(self) -> np.ndarray:
        r = self.ray
        return self.origins[r] + self.t_in[:, None] * self.directions[r]

    @property
    def out_points(self) -> np.ndarray:
        r = self.ray
        return self.origins[r] + self.t_out[:, None] * self.directions[r]

    def sdf_in(self, sdf) -> np.ndarray:
        return _face_interp(self.in_w, np.asarray(sdf)[self.in_verts])

    def sdf_out(self, sdf) -> np.ndarray:
        return _face_interp(self.out_w, np.asarray(sdf)[self.out_verts])

    def select(self, keep) -> "SegmentList":
        """Subset of segments (boolean mask, kept in order)."""
        keep = np.asarray(keep, dtype=bool)
        counts = np.add.reduceat(keep.astype(np.int64), self.offsets[:-1]) if len(keep) else np.zeros(self.n_rays, np.int64)
        counts = np.where(np.diff(self.offsets) > 0, counts, 0)
        offsets = np.zeros(self.n_rays + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return SegmentList(self.origins, self.directions, offsets, *(a[keep] for a in (
            self.tet, self.entry_slot, self.exit_slot, self.t_in, self.t_out,
            self.in_verts, self.in_w, self.out_verts, self.out_w)))

    def ray_segments(self, r: int) -> slice:
        return slice(int(self.offsets[r]), int(self.offsets[r + 1]))


def _face_interp(w, vals):
    # affine form: exact for constant fields, where sum(w) may be 1 +- ulp
    v0 = vals[:, 0]
    return v0 + w[:, 1] * (vals[:, 1] - v0) + w[:, 2] * (vals[:, 2] - v0)


def camera_tets(mesh: TetMesh, vertex: int) -> np.ndarray:
    if not 0 <= vertex < len(mesh.positions):
        raise IndexError(f"vertex {vertex} not in mesh")
    offsets, ids = mesh.vertex_tets
    out = ids[offsets[vertex]:offsets[vertex + 1]]
    if len(out) == 0:
        raise IndexError(f"vertex {vertex} is not used by any tet")
    return np.sort(out)


@nb.njit(cache=True)
def _frame(v):
    # (u, w) with u x w = v
    if abs(v[0]) < 0.9:
        ax, ay, az = 1.0, 0.0, 0.0
    else:
        ax, ay, az = 0.0, 1.0, 0.0
    ux = ay * v[2] - az * v[1]
    uy = az * v[0] - ax * v[2]
    uz = ax * v[1] - ay * v[0]
    nu = math.sqrt(ux * ux + uy * uy + uz * uz)
    ux /= nu
    uy /= nu
    uz /= nu
    wx = v[1] * uz - v[2] * uy
    wy = v[2] * ux - v[0] * uz
    wz = v[0] * uy - v[1] * ux
    return ux, uy, uz, wx, wy, wz


@nb.njit(cache=True)
def _face_test(P, tets, faces, t, slot, o, fr, out_w):
    """Oriented 2D containment of the projected origin in face ``slot`` of tet t.

    Returns 1 when strictly inside (counter-clockwise), 0 when outside and -1
    when the origin is within tolerance of an edge. Fills out_w on success.
    """
    ux, uy, uz, wx, wy, wz = fr
    xs = np.empty(3)
    ys = np.empty(3)
    scale = 0.0
    for q in range(3):
        vid = tets[t, faces[slot, q]]
        dx = P[vid, 0] - o[0]
        dy = P[vid, 1] - o[1]
        dz = P[vid, 2] - o[2]
        xs[q] = dx * ux + dy * uy + dz * uz
        ys[q] = dx * wx + dy * wy + dz * wz
        scale = max(scale, abs(xs[q]), abs(ys[q]))
    c0 = xs[1] * ys[2] - ys[1] * xs[2]  # (0, b, c) -> weight of a
    c1 = xs[2] * ys[0] - ys[2] * xs[0]  # (0, c, a) -> weight of b
    c2 = xs[0] * ys[1] - ys[0] * xs[1]  # (0, a, b) -> weight of c
    eps = _CONTAIN_EPS * scale * scale
    if c0 > eps and c1 > eps and c2 > eps:
        s = c0 + c1 + c2
        out_w[0] = c0 / s
        out_w[1] = c1 / s
        out_w[2] = c2 / s
        return 1
    if c0 >= -eps and c1 >= -eps and c2 >= -eps:
        return -1
    return 0


@nb.njit(cache=True)
def _march_one(P, tets, nbrs, faces, vt_off, vt_ids, cam, o, v, cap, pos0,
               o_tet, o_eslot, o_xslot, o_tin, o_tout, o_iv, o_iw, o_ov, o_ow):
    """Walk one ray; writes from index pos0. Returns (status, count)."""
    fr = _frame(v)
    w = np.empty(3)
    start = -1
    start_slot = -1
    ambiguous = False
    for q in range(vt_off[cam], vt_off[cam + 1]):
        t = vt_ids[q]
        slot = 0
        for k in range(4):
            if tets[t, k] == cam:
                slot = k
        res = _face_test(P, tets, faces, t, slot, o, fr, w)
        if res == 1:
            start = t
            start_slot = slot
            break
        if res == -1:
            ambiguous = True
    if start < 0:
        if ambiguous:
            return GRAZING, 0
        return OK, 0
    count = 0
    cur = start
    xslot = start_slot
    t_prev = 0.0
    # entry of the first segment is the camera vertex itself
    iv0, iv1, iv2 = cam, cam, cam
    iw0, iw1, iw2 = 1.0, 0.0, 0.0
    eslot = -1
    while True:
        # exit point from the barycentric weights in w
        a = tets[cur, faces[xslot, 0]]
        b = tets[cur, faces[xslot, 1]]
        c = tets[cur, faces[xslot, 2]]
        px = w[0] * P[a, 0] + w[1] * P[b, 0] + w[2] * P[c, 0]
        py = w[0] * P[a, 1] + w[1] * P[b, 1] + w[2] * P[c, 1]
        pz = w[0] * P[a, 2] + w[1] * P[b, 2] + w[2] * P[c, 2]
        t_out = (px - o[0]) * v[0] + (py - o[1]) * v[1] + (pz - o[2]) * v[2]
        if t_out < t_prev - 1e-9 * (1.0 + abs(t_prev)):
            return CYCLE, count
        k = pos0 + count
        o_tet[k] = cur
        o_eslot[k] = eslot
        o_xslot[k] = xslot
        o_tin[k] = t_prev
        o_tout[k] = t_out
        o_iv[k, 0] = iv0
        o_iv[k, 1] = iv1
        o_iv[k, 2] = iv2
        o_iw[k, 0] = iw0
        o_iw[k, 1] = iw1
        o_iw[k, 2] = iw2
        o_ov[k, 0] = a
        o_ov[k, 1] = b
        o_ov[k, 2] = c
        o_ow[k, 0] = w[0]
        o_ow[k, 1] = w[1]
        o_ow[k, 2] = w[2]
        count += 1
        word = nbrs[cur, xslot]
        if word < 0 or count >= cap:
            return OK, count
        nxt = word >> 2
        eslot = word & 3
        # entry face of nxt is the same face; keep its vertex order for the weights
        iv0, iv1, iv2 = a, b, c
        iw0, iw1, iw2 = w[0], w[1], w[2]
        t_prev = t_out
        cur = nxt
        found = -1
        for s in range(4):
            if s == eslot:
                continue
            res = _face_test(P, tets, faces, cur, s, o, fr, w)
            if res == 1:
                found = s
                break
            if res == -1:
                return GRAZING, count
        if found < 0:
            return GRAZING, count
        xslot = found


@nb.njit(cache=True)
def _march_batch(P, tets, nbrs, faces, vt_off, vt_ids, cams, origins, dirs, cap, start, pos,
                 o_tet, o_eslot, o_xslot, o_tin, o_tout, o_iv, o_iw, o_ov, o_ow,
                 counts, status):
    """March rays from ``start`` writing at ``pos`` until done or the buffer
    may overflow. Returns (next ray, next write position)."""
    room = o_tet.shape[0]
    for r in range(start, origins.shape[0]):
        if room - pos < cap:
            return r, pos
        st, cnt = _march_one(P, tets, nbrs, faces, vt_off, vt_ids, cams[r], origins[r], dirs[r], cap, pos,
                             o_tet, o_eslot, o_xslot, o_tin, o_tout, o_iv, o_iw, o_ov, o_ow)
        status[r] = st
        counts[r] = cnt if st == OK else 0
        if st == OK:
            pos += cnt
    return origins.shape[0], pos


def perturb_direction(v, key: int, attempt: int, angle: float = 1e-7) -> np.ndarray:
    """Rotate ``v`` by ``angle`` about an axis drawn from a stream keyed on ``key``."""
    gen = np.random.Generator(np.random.Philox(key=int(key) & 0xFFFFFFFFFFFFFFFF, counter=[attempt, 1, 0, 0]))
    a = gen.normal(size=3)
    axis = np.cross(v, a)
    axis /= np.linalg.norm(axis)
    # Rodrigues; axis is orthogonal to v
    out = v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)
    return out / np.linalg.norm(out)


def march_rays(mesh: TetMesh, cam_vertices, origins, directions, cap: int = DEFAULT_CAP,
               keys=None, max_attempts: int = 8) -> SegmentList:
    """Walk a batch of rays, each starting at its camera vertex.

    Grazing rays are retried with a 1e-7 rad deterministic perturbation keyed
    on ``keys`` (pixel ids; defaults to the ray index). The directions stored
    in the result are the ones actually marched.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3).copy()
    cams = np.ascontiguousarray(np.broadcast_to(np.asarray(cam_vertices, dtype=np.int64), (len(origins),)))
    keys = np.arange(len(origins)) if keys is None else np.asarray(keys)
    n = len(origins)
    vt_off, vt_ids = mesh.vertex_tets
    P = np.ascontiguousarray(mesh.positions, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    first = np.zeros(n, dtype=np.int64)
    bufs = _alloc(32 * n + cap)
    used = 0
    pending = np.arange(n)
    for attempt in range(max_attempts + 1):
        sub_counts = np.zeros(len(pending), np.int64)
        sub_status = np.zeros(len(pending), np.int64)
        o_p, d_p, c_p = origins[pending], dirs[pending], cams[pending]
        base = used
        done = 0
        while done < len(pending):
            done, used = _march_batch(P, mesh.tets, mesh.neighbors, FACES, vt_off, vt_ids, c_p, o_p, d_p,
                                      cap, done, used, *bufs, sub_counts, sub_status)
            if done < len(pending):
                bufs = tuple(_grow(b, 2 * len(b)) for b in bufs)
        if np.any(sub_status == CYCLE):
            raise TraversalError("ray walk went backwards; adjacency is broken")
        # failed rays wrote nothing persistent (their slots are reused)
        counts[pending] = sub_counts
        first[pending] = base + np.concatenate([[0], np.cumsum(sub_counts)[:-1]])
        pending = pending[sub_status != OK]
        if len(pending) == 0:
            break
        for r in pending:
            dirs[r] = perturb_direction(dirs[r], keys[r], attempt)
    if len(pending):
        raise GrazingRay(f"{len(pending)} rays stayed degenerate after {max_attempts} perturbations")
    return _assemble(origins, dirs, counts, first, bufs)


def _alloc(size):
    return (np.empty(size, np.int64), np.empty(size, np.int64), np.empty(size, np.int64),
            np.empty(size), np.empty(size), np.empty((size, 3), np.int64), np.empty((size, 3)),
            np.empty((size, 3), np.int64), np.empty((size, 3)))


def _grow(buf, size):
    out = np.empty((size,) + buf.shape[1:], dtype=buf.dtype)
    out[:len(buf)] = buf
    return out


def _assemble(origins, dirs, counts, first, bufs):
    offsets = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    idx = np.repeat(first - offsets[:-1], counts) + np.arange(offsets[-1])
    return SegmentList(origins, dirs, offsets, *(b[idx] for b in bufs))


def march(mesh: TetMesh, state_or_sdf, ray: Ray, cam_vertex: int, cap: int = DEFAULT_CAP, key: int = 0) -> SegmentList:
    """Single-ray convenience wrapper; ``state_or_sdf`` is unused by the walk
    itself (SDF values are read lazily through :meth:`SegmentList.sdf_in`)."""
    return march_rays(mesh, [cam_vertex], ray.origin[None], ray.direction[None], cap, keys=[key])


def exit_face(verts, origin, direction, entry_slot: int = -1) -> int:
    """Exit slot of the ray leaving a single tet (vertices in positive order).

    Raises :class:`GrazingRay` when the projected origin sits on an edge, and
    ``ValueError`` when no face other than the entry face contains it.
    """
    P = np.ascontiguousarray(verts, dtype=np.float64)
    tets = np.arange(4, dtype=np.int64)[None]
    v = np.asarray(direction, dtype=np.float64)
    o = np.asarray(origin, dtype=np.float64)
    fr = _frame(v)
    w = np.empty(3)
    for s in range(4):
        if s == entry_slot:
            continue
        res = _face_test(P, tets, FACES, 0, s, o, fr, w)
        if res == 1:
            return s
        if res == -1:
            raise GrazingRay("ray passes through an edge or vertex of the exit face")
    raise ValueError("ray does not leave the tetrahedron through a non-entry face")


def segment_alphas(seg: SegmentList, sdf, beta: float) -> np.ndarray:
    from .render import alpha_values

    return alpha_values(seg.sdf_in(sdf), seg.sdf_out(sdf), beta)


@nb.njit(cache=True)
def _transmittance_cut(offsets, alphas, keep, t_min):
    for r in range(offsets.shape[0] - 1):
        T = 1.0
        for s in range(offsets[r], offsets[r + 1]):
            if T < t_min:
                keep[s] = False
                continue
            if keep[s]:
                T *= 1.0 - alphas[s]


def prune(seg: SegmentList, mesh: TetMesh, sdf, beta: float, band: float = 4.0, t_min: float = 1e-4) -> SegmentList:
    """Drop segments in tets whose four SDFs all exceed ``band / beta`` and
    everything after the accumulated transmittance falls below ``t_min``."""
    sdf = np.asarray(sdf, dtype=np.float64)
    keep = ~np.all(sdf[mesh.tets[seg.tet]] > band / beta, axis=1)
    alphas = segment_alphas(seg, sdf, beta)
    _transmittance_cut(seg.offsets, alphas, keep, t_min)
    return seg.select(keep)


def subdivide_crossing(t_in: float, t_out: float, sdf_in: float, sdf_out: float):
    """Split a segment at the linear zero of its endpoint SDFs.

    Returns a list of (t_a, t_b, sdf_a, sdf_b) tuples, one or two long.
    """
    if sdf_in * sdf_out < 0.0:
        t_star = t_in + (t_out - t_in) * sdf_in / (sdf_in - sdf_out)
        return [(t_in, t_star, sdf_in, 0.0), (t_star, t_out, 0.0, sdf_out)]
    return [(t_in, t_out, sdf_in, sdf_out)]


def ray_tet_interval(verts, origin, direction):
    """Clip the ray against the four face half-spaces of one tet; (t0, t1) or None.

    Independent of the marching code path.
    """
    verts = np.asarray(verts, dtype=np.float64)
    t0, t1 = 0.0, np.inf
    for k in range(4):
        a, b, c = verts[FACES[k]]
        n = np.cross(b - a, c - a)
        denom = float(np.dot(n, direction))
        num = float(np.dot(n, a - origin))
        if denom == 0.0:
            if num < 0.0:
                return None
            continue
        t = num / denom
        if denom > 0:
            t1 = min(t1, t)
        else:
            t0 = max(t0, t)
    return (t0, t1) if t1 > t0 else None
