import numpy as np
import pytest

from vortsdf.geom import (BOUNDARY, FACES, GeometryError, SiteSet, barycentric, build_adjacency, build_kdtree,
                          delaunay, insphere, knn, knn_table, orient3d, unpack_neighbor)

CUBE = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


def brute_knn(pos, q, k, exclude=None):
    d = np.linalg.norm(pos - q, axis=1)
    if exclude is not None:
        d[exclude] = np.inf
    return np.argsort(d, kind="stable")[:k]


def test_siteset_rejects_nonfinite():
    with pytest.raises(GeometryError):
        SiteSet([[0, 0, np.nan]])


def test_kdtree_cube_corners_exact(rng):
    tree = build_kdtree(SiteSet(CUBE))
    for q in rng.uniform(-0.5, 1.5, (50, 3)):
        _, i = tree.query(q, 1)
        assert i == brute_knn(CUBE, q, 1)[0]


def test_kdtree_singleton():
    tree = build_kdtree(SiteSet([[0.3, 0.2, 0.1]]))
    for q in ([0, 0, 0], [5, -5, 9]):
        assert tree.query(q, 1)[1] == 0


def test_kdtree_empty():
    with pytest.raises(GeometryError):
        build_kdtree(np.zeros((0, 3)))


def test_knn_line():
    pos = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    assert set(knn(build_kdtree(pos), pos[2], 2)) == {1, 3}


def test_knn_all_others():
    pos = np.random.default_rng(3).random((9, 3))
    out = knn(build_kdtree(pos), pos[4], 8)
    assert sorted(out) == [0, 1, 2, 3, 5, 6, 7, 8]


def test_knn_k_too_large():
    pos = np.random.default_rng(3).random((5, 3))
    with pytest.raises(GeometryError):
        knn(build_kdtree(pos), pos[0], 6)


def test_knn_matches_brute_force_10k():
    rng = np.random.default_rng(7)
    pos = rng.random((10_000, 3))
    tree = build_kdtree(pos)
    for q in rng.random((100, 3)):
        np.testing.assert_array_equal(knn(tree, q, 24), brute_knn(pos, q, 24))


@pytest.mark.parametrize("k", [1, 8, 32])
def test_knn_table_matches_brute_force(k):
    pos = np.random.default_rng(k).random((2000, 3))
    table = knn_table(build_kdtree(pos), k)
    for i in range(0, 2000, 97):
        np.testing.assert_array_equal(table[i], brute_knn(pos, pos[i], k, exclude=i))


def test_delaunay_single_tet():
    m = delaunay(UNIT_TET)
    assert m.n_tets == 1
    assert np.all(m.neighbors == BOUNDARY)


def test_delaunay_tet_plus_centroid():
    pts = np.vstack([UNIT_TET, UNIT_TET.mean(0)])
    m = delaunay(pts)
    assert m.n_tets == 4
    assert np.all(np.any(m.tets == 4, axis=1))


def test_delaunay_coplanar_raises():
    pts = np.c_[np.random.default_rng(0).random((10, 2)), np.zeros(10)]
    with pytest.raises(GeometryError):
        delaunay(pts)


def _check_empty_spheres(pos, m, rel_tol=1e-9):
    diag = np.linalg.norm(pos.max(0) - pos.min(0))
    a, b, c, d = (pos[m.tets[:, k]] for k in range(4))
    # circumcenter by solving the bisector system per tet
    A = 2 * np.stack([b - a, c - a, d - a], axis=1)
    rhs = np.stack([np.sum(b * b - a * a, 1), np.sum(c * c - a * a, 1), np.sum(d * d - a * a, 1)], axis=1)
    cen = np.linalg.solve(A, rhs[..., None])[..., 0]
    rad = np.linalg.norm(a - cen, axis=1)
    dist = np.linalg.norm(pos[None, :, :] - cen[:, None, :], axis=2)
    inside = dist < rad[:, None] - rel_tol * diag
    return int(inside.sum())


def test_delaunay_empty_circumsphere_200():
    pos = np.random.default_rng(11).random((200, 3))
    m = delaunay(pos)
    assert np.all(orient3d(*(pos[m.tets[:, k]] for k in range(4))) > 0)
    assert _check_empty_spheres(pos, m) == 0


def test_delaunay_lattice_has_no_flat_tets():
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    m = delaunay(g)
    assert np.all(m.volumes > 1e-6)
    assert np.isclose(m.volumes.sum(), 27.0)
    assert _check_empty_spheres(g, m, 1e-9) == 0


def test_insphere_sign():
    a, b, c, d = UNIT_TET
    assert insphere(a, b, c, d, np.full(3, 0.25)) > 0
    assert insphere(a, b, c, d, np.full(3, 5.0)) < 0


def test_adjacency_single_tet():
    m = build_adjacency([[0, 1, 2, 3]], UNIT_TET)
    assert np.all(m.neighbors == BOUNDARY)


def test_adjacency_two_glued():
    pos = np.vstack([UNIT_TET, [[1, 1, 1]]])
    m = build_adjacency([[0, 1, 2, 3], [4, 1, 3, 2]], pos)
    t0, s0 = unpack_neighbor(m.neighbors[0])
    t1, s1 = unpack_neighbor(m.neighbors[1])
    assert list(t0).count(1) == 1 and list(t1).count(0) == 1
    assert (m.neighbors[0] != BOUNDARY).sum() == 1 and (m.neighbors[1] != BOUNDARY).sum() == 1


def test_adjacency_non_manifold():
    pos = np.vstack([UNIT_TET, [[1, 1, 1]], [[-1, -1, -1]]])
    with pytest.raises(GeometryError):
        build_adjacency([[0, 1, 2, 3], [4, 1, 3, 2], [5, 1, 2, 3]], pos)


def test_adjacency_symmetry_delaunay_200():
    pos = np.random.default_rng(5).random((200, 3))
    m = delaunay(pos)
    faces = {}
    for t in range(m.n_tets):
        for k in range(4):
            faces.setdefault(tuple(sorted(m.tets[t, FACES[k]])), []).append((t, k))
    assert all(len(v) <= 2 for v in faces.values())
    n_interior = 0
    for owners in faces.values():
        if len(owners) == 2:
            (ta, ka), (tb, kb) = owners
            nt, ns = unpack_neighbor(m.neighbors[ta, ka])
            assert (nt, ns) == (tb, kb)
            nt, ns = unpack_neighbor(m.neighbors[tb, kb])
            assert (nt, ns) == (ta, ka)
            n_interior += 1
        else:
            t, k = owners[0]
            assert m.neighbors[t, k] == BOUNDARY
    assert 4 * m.n_tets == 2 * n_interior + (m.neighbors == BOUNDARY).sum()


def test_barycentric_vertex_and_centroid():
    np.testing.assert_allclose(barycentric(UNIT_TET, UNIT_TET[0]), [1, 0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(barycentric(UNIT_TET, UNIT_TET.mean(0)), [0.25] * 4, atol=1e-15)


def test_barycentric_random_interior():
    rng = np.random.default_rng(9)
    for _ in range(200):
        v = rng.normal(size=(4, 3))
        if orient3d(*v) < 0:
            v[[2, 3]] = v[[3, 2]]
        w0 = rng.dirichlet(np.ones(4))
        p = w0 @ v
        w = barycentric(v, p)
        # linear-solve oracle on the homogeneous 4x4 system
        ref = np.linalg.solve(np.vstack([v.T, np.ones(4)]), np.r_[p, 1.0])
        np.testing.assert_allclose(w, ref, atol=1e-9)
        assert abs(w.sum() - 1.0) <= 1e-12
        assert np.all(w >= -1e-9) and np.all(w <= 1 + 1e-9)
        diam = max(np.linalg.norm(v[i] - v[j]) for i in range(4) for j in range(i))
        assert np.linalg.norm(w @ v - p) <= 1e-10 * diam


def test_barycentric_degenerate():
    flat = UNIT_TET.copy()
    flat[3] = [0.5, 0.5, 0.0]
    with pytest.raises(GeometryError):
        barycentric(flat, [0.1, 0.1, 0.0])


def test_affine_inverse_agrees_with_barycentric():
    pos = np.random.default_rng(2).random((50, 3))
    m = delaunay(pos)
    for t in range(0, m.n_tets, 17):
        p = pos[m.tets[t]].mean(0)
        np.testing.assert_allclose(m.affine_inverse[t] @ np.r_[p, 1.0], barycentric(pos[m.tets[t]], p), atol=1e-10)


def test_delaunay_retries_when_tie_break_too_small(monkeypatch):
    import vortsdf.geom as g
    from scipy.spatial import Delaunay

    real = g._perturbed_lift_delaunay
    calls = []

    def flaky(positions, diag, eps=1e-9):
        calls.append(eps)
        if len(calls) == 1:
            return Delaunay(positions).simplices.astype(np.int64)  # still has flat tets
        return real(positions, diag, eps)

    monkeypatch.setattr(g, "_perturbed_lift_delaunay", flaky)
    side = np.arange(4.0)
    P = np.stack(np.meshgrid(side, side, side, indexing="ij"), -1).reshape(-1, 3)
    m = g.delaunay(P)
    assert calls == [1e-9, 1e-7]
    assert np.all(orient3d(*(P[m.tets[:, k]] for k in range(4))) > 1e-9)


def test_delaunay_gives_up_on_persistent_flats(monkeypatch):
    import vortsdf.geom as g
    from scipy.spatial import Delaunay

    monkeypatch.setattr(g, "_perturbed_lift_delaunay",
                        lambda positions, diag, eps=1e-9: Delaunay(positions).simplices.astype(np.int64))
    side = np.arange(3.0)
    P = np.stack(np.meshgrid(side, side, side, indexing="ij"), -1).reshape(-1, 3)
    with pytest.raises(GeometryError, match="flat"):
        g.delaunay(P)
