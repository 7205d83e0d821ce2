import numpy as np
import pytest

from conftest import jittered_lattice
from vortsdf.extract import (EmptyMeshError, TriangleGrid, TriMesh, chamfer, marching_tetrahedra, point_to_mesh,
                             point_to_mesh_brute, read_mesh, read_obj, read_ply, sample_surface, write_ply)
from vortsdf.geom import CAMERA, build_adjacency, delaunay
from vortsdf.scene import gt_mesh

UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


def one_tet():
    return build_adjacency([[0, 1, 2, 3]], UNIT_TET)


def test_mt_one_negative_vertex():
    out = marching_tetrahedra(one_tet(), [-1.0, 1, 1, 1])
    assert len(out) == 1
    np.testing.assert_allclose(np.sort(out.vertices, axis=0), np.sort(0.5 * UNIT_TET[1:], axis=0))
    # normal points toward positive sdf, i.e. away from vertex 0
    assert np.dot(out.normals()[0], [1, 1, 1]) > 0


def test_mt_two_negative_vertices():
    out = marching_tetrahedra(one_tet(), [-1.0, -1, 1, 1])
    assert len(out) == 2 and len(out.vertices) == 4
    n = out.normals()
    g = np.array([0.0, 2.0, 2.0])  # (s1-s0, s2-s0, s3-s0) on the unit tet
    assert np.all(n @ g > 0)


def test_mt_no_crossing():
    assert len(marching_tetrahedra(one_tet(), [1.0, 2, 3, 4])) == 0
    assert len(marching_tetrahedra(one_tet(), [-1.0, -2, -3, -4])) == 0


def test_mt_zero_counts_positive():
    assert len(marching_tetrahedra(one_tet(), [0.0, 0, 0, 0])) == 0
    assert len(marching_tetrahedra(one_tet(), [-1.0, 0, 0, 0])) == 1


def test_mt_exclude_camera_tets():
    P = jittered_lattice(5, seed=1)
    m = delaunay(P)
    sdf = np.linalg.norm(P - 0.5, axis=1) - 0.3
    kind = np.zeros(len(P), bool)
    kind[0] = True
    full = marching_tetrahedra(m, sdf)
    part = marching_tetrahedra(m, sdf, exclude=kind)
    assert len(part) <= len(full)


def _sphere_mt(side=12, seed=0):
    P = jittered_lattice(side, 0.2, seed, -1.0, 1.0)
    m = delaunay(P)
    sdf = np.linalg.norm(P, axis=1) - 0.5
    return m, sdf, marching_tetrahedra(m, sdf)


def test_mt_sphere_closed_manifold_on_level_set():
    m, sdf, out = _sphere_mt()
    assert out.is_closed()
    _, counts = out.edge_counts()
    assert np.all(counts == 2)
    assert not np.any(out.degenerate())
    # each vertex lies on a mesh edge where the linear interpolant vanishes
    P = m.positions
    for v in out.vertices[:200]:
        e = m.edges
        a, b = P[e[:, 0]], P[e[:, 1]]
        t = np.einsum("ij,ij->i", v - a, b - a) / np.einsum("ij,ij->i", b - a, b - a)
        on = np.linalg.norm(a + t[:, None] * (b - a) - v, axis=1) < 1e-12
        on &= (t >= 0) & (t <= 1)
        k = np.nonzero(on)[0][0]
        s = sdf[e[k, 0]] + t[k] * (sdf[e[k, 1]] - sdf[e[k, 0]])
        assert abs(s) < 1e-12


def test_mt_outward_orientation():
    _, _, out = _sphere_mt()
    # consistent orientation: every directed edge is used exactly once
    d = out.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    assert len(np.unique(d, axis=0)) == len(d)
    c = out.corners.mean(axis=1)
    assert np.mean(np.einsum("ij,ij->i", out.normals(), c) > 0) > 0.99
    # signed volume of a closed outward surface is positive
    vol = np.sum(np.einsum("ij,ij->i", out.corners[:, 0], np.cross(out.corners[:, 1], out.corners[:, 2]))) / 6
    assert vol == pytest.approx(4 / 3 * np.pi * 0.125, rel=0.1)


def test_trimesh_validation():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 5]])


def test_point_on_triangle_and_above():
    tri = TriMesh([[-10, -10, 0], [10, -10, 0], [0, 10, 0]], [[0, 1, 2]])
    assert point_to_mesh([0.5, 0.2, 0.0], tri) == pytest.approx(0.0, abs=1e-15)
    assert point_to_mesh([0.5, 0.2, 0.7], tri) == pytest.approx(0.7, abs=1e-14)
    assert point_to_mesh([0.5, 0.2, -0.7], tri, max_dist=5.0) == pytest.approx(0.7, abs=1e-14)


def test_point_to_mesh_empty():
    with pytest.raises(EmptyMeshError):
        point_to_mesh([0, 0, 0], TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def _python_point_triangle(p, a, b, c):
    """Minimum over the plane projection (if inside) and the three edges."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    best = np.inf
    w = np.linalg.lstsq(np.c_[b - a, c - a], q - a, rcond=None)[0]
    if w[0] >= 0 and w[1] >= 0 and w.sum() <= 1:
        best = abs(np.dot(p - a, n))
    for u, v in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0, 1)
        best = min(best, np.linalg.norm(p - (u + t * (v - u))))
    return best


def test_point_triangle_kernel_vs_python(rng):
    for _ in range(300):
        a, b, c, p = rng.normal(size=(4, 3))
        tri = TriMesh([a, b, c], [[0, 1, 2]])
        assert point_to_mesh_brute(p, tri)[0] == pytest.approx(_python_point_triangle(p, a, b, c), abs=1e-12)


@pytest.fixture(scope="module")
def torus_queries():
    mesh = gt_mesh("torus")
    pts = np.random.default_rng(2).uniform(-1.5, 1.5, (1000, 3))
    return mesh, pts, point_to_mesh_brute(pts, mesh)


@pytest.mark.parametrize("max_dist", [np.inf, 0.1, 10.0])
def test_accelerated_distance_equals_brute(torus_queries, max_dist):
    mesh, pts, ref = torus_queries
    np.testing.assert_allclose(point_to_mesh(pts, mesh, max_dist), np.minimum(ref, max_dist), atol=1e-12, rtol=0)


@pytest.mark.parametrize("clip", [0.05, 0.1])
def test_grid_distance_equals_brute(torus_queries, clip):
    mesh, pts, ref = torus_queries
    np.testing.assert_allclose(TriangleGrid(mesh).distance(pts, clip), np.minimum(ref, clip), atol=1e-12, rtol=0)


def test_grid_far_points():
    mesh = gt_mesh("sphere")
    pts = np.random.default_rng(3).normal(size=(200, 3)) * 20
    np.testing.assert_allclose(TriangleGrid(mesh).distance(pts), point_to_mesh_brute(pts, mesh), atol=1e-12)


def test_sample_surface_uniform_and_deterministic():
    mesh = gt_mesh("box")
    a = sample_surface(mesh, 60_000, seed=4)
    np.testing.assert_array_equal(a, sample_surface(mesh, 60_000, seed=4))
    assert point_to_mesh_brute(a[:500], mesh).max() < 1e-12
    # six equal faces: each receives about a sixth
    face = np.argmax(np.abs(a), axis=1) * 2 + (a[np.arange(len(a)), np.argmax(np.abs(a), axis=1)] > 0)
    frac = np.bincount(face, minlength=6) / len(a)
    np.testing.assert_allclose(frac, 1 / 6, atol=0.01)


def test_chamfer_identical_and_translated():
    mesh = gt_mesh("sphere")
    acc, compl = chamfer(mesh, mesh, n_samples=20_000)
    assert acc < 1e-12 and compl < 1e-12
    moved = TriMesh(mesh.vertices + [0, 0, 2.0], mesh.triangles)
    acc, compl = chamfer(mesh, moved, n_samples=20_000)
    assert acc == pytest.approx(0.1) and compl == pytest.approx(0.1)


def test_chamfer_translation_half_meter():
    box = gt_mesh("box")
    shifted = TriMesh(box.vertices + [0.5, 0, 0], box.triangles)
    acc, compl = chamfer(box, shifted, n_samples=50_000)
    # most samples are further than the clip; faces parallel to the shift overlap partly
    assert acc <= 0.1 and compl <= 0.1
    far = TriMesh(box.vertices + [5.0, 0, 0], box.triangles)
    assert chamfer(box, far, n_samples=5000) == (pytest.approx(0.1), pytest.approx(0.1))


def test_chamfer_sphere_offset():
    unit = TriMesh(gt_mesh("sphere").vertices / 0.5, gt_mesh("sphere").triangles)
    big = TriMesh(unit.vertices * 1.01, unit.triangles)
    acc, compl = chamfer(unit, big, n_samples=100_000)
    # a polyhedral sphere sits slightly inside its circumsphere; allow the facet sag
    assert acc == pytest.approx(0.01, abs=1.5e-3)
    assert compl == pytest.approx(0.01, abs=1.5e-3)


def test_chamfer_symmetry():
    a = gt_mesh("sphere")
    b = gt_mesh("torus")
    acc_ab, compl_ab = chamfer(a, b, n_samples=10_000, seed=5)
    acc_ba, compl_ba = chamfer(b, a, n_samples=10_000, seed=5)
    assert acc_ab == pytest.approx(compl_ba, rel=0.05)
    assert compl_ab == pytest.approx(acc_ba, rel=0.05)


def test_chamfer_point_sample_gt():
    mesh = gt_mesh("sphere")
    acc, _ = chamfer(sample_surface(mesh, 10_000), mesh, n_samples=10_000)
    assert acc < 1e-12
    with pytest.raises(EmptyMeshError):
        chamfer(np.zeros((0, 3)), mesh)


def test_ply_roundtrip(tmp_path):
    mesh = gt_mesh("torus")
    write_ply(tmp_path / "t.ply", mesh)
    back = read_mesh(tmp_path / "t.ply")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    assert (tmp_path / "t.ply").read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")


def test_ply_float_and_quads(tmp_path):
    header = ("ply\nformat binary_little_endian 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
              "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
              "end_header\n").encode()
    v = np.zeros(4, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1")])
    v["x"] = [0, 1, 1, 0]
    v["y"] = [0, 0, 1, 1]
    body = v.tobytes() + bytes([4]) + np.array([0, 1, 2, 3], "<i4").tobytes()
    (tmp_path / "q.ply").write_bytes(header + body)
    m = read_ply(tmp_path / "q.ply")
    assert m.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_ply_ascii_rejected(tmp_path):
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(ValueError, match="binary_little_endian"):
        read_ply(tmp_path / "a.ply")


def test_obj_reader(tmp_path):
    (tmp_path / "m.obj").write_text("# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    m = read_obj(tmp_path / "m.obj")
    assert m.triangles.tolist() == [[0, 1, 2], [0, 2, 3]]
    (tmp_path / "bad.obj").write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(ValueError, match="bad.obj:2"):
        read_obj(tmp_path / "bad.obj")
    with pytest.raises(ValueError):
        read_mesh(tmp_path / "m.stl")
