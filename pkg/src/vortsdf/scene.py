"""Calibrated cameras, multi-view scene datasets, and analytic synthetic scenes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .extract import TriMesh, read_mesh, write_ply
from .traverse import Ray


class SceneError(ValueError):
    """Missing or ill-formed scene input."""


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise SceneError("image size must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise SceneError("camera rotation is not orthonormal with det +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def w2c(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_w2c(cls, w2c, fx, fy, cx, cy, width, height) -> "CameraModel":
        m = np.asarray(w2c, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise SceneError("w2c last row must be (0, 0, 0, 1)")
        return cls(fx, fy, cx, cy, m[:3, :3], m[:3, 3], int(width), int(height))

    def project(self, points) -> np.ndarray:
        """Pixel coordinates (continuous, pixel centers at +0.5) of world points."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx, self.fy * pc[..., 1] / pc[..., 2] + self.cy], -1)


def pixel_rays(camera: CameraModel, xs, ys):
    """Origins and unit directions through pixel centers (vectorized)."""
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if np.any((xs < 0) | (xs >= camera.width) | (ys < 0) | (ys >= camera.height)):
        raise IndexError("pixel outside the image")
    d_cam = np.stack([(xs + 0.5 - camera.cx) / camera.fx, (ys + 0.5 - camera.cy) / camera.fy, np.ones(xs.shape)], -1)
    d = d_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def pixel_ray(camera: CameraModel, x: int, y: int) -> Ray:
    o, d = pixel_rays(camera, np.array([x]), np.array([y]))
    return Ray(o[0], d[0])


@dataclass
class SceneDataset:
    cameras: list
    images: list
    bbox: np.ndarray
    gt_mesh: TriMesh | None = None
    names: list = field(default=None)

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        if not np.all(self.bbox[1] > self.bbox[0]):
            raise SceneError("bbox must have positive extent on every axis")
        if len(self.cameras) != len(self.images):
            raise SceneError("camera and image counts differ")
        for i, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise SceneError(f"image {i} is {img.shape[:2]}, camera expects {(cam.height, cam.width)}")
        if self.names is None:
            self.names = [f"view_{i:03d}.png" for i in range(len(self.cameras))]

    def __len__(self):
        return len(self.cameras)


def quantize(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def save_scene(dataset: SceneDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cams = []
    for name, cam, img in zip(dataset.names, dataset.cameras, dataset.images):
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), "RGB").save(d / name)
        cams.append({"file": name, "width": cam.width, "height": cam.height, "fx": cam.fx, "fy": cam.fy,
                     "cx": cam.cx, "cy": cam.cy, "w2c": cam.w2c.ravel().tolist()})
    doc = {"bbox": dataset.bbox.tolist(), "cameras": cams}
    if dataset.gt_mesh is not None:
        write_ply(d / "gt_mesh.ply", dataset.gt_mesh)
        doc["gt_mesh"] = "gt_mesh.ply"
    (d / "scene.json").write_text(json.dumps(doc, indent=1))


def load_scene(directory) -> SceneDataset:
    d = Path(directory)
    path = d / "scene.json"
    if not path.is_file():
        raise SceneError(f"{path}: not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    try:
        cams, images, names = [], [], []
        for i, c in enumerate(doc["cameras"]):
            cam = CameraModel.from_w2c(c["w2c"], float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                       c["width"], c["height"])
            img_path = d / c["file"]
            if not img_path.is_file():
                raise SceneError(f"{img_path}: image for camera {i} not found")
            with Image.open(img_path) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
            cams.append(cam)
            names.append(c["file"])
        bbox = np.asarray(doc["bbox"], dtype=np.float64)
        gt = read_mesh(d / doc["gt_mesh"]) if doc.get("gt_mesh") else None
    except (KeyError, TypeError) as exc:
        raise SceneError(f"{path}: missing or ill-typed field {exc}") from exc
    return SceneDataset(cams, images, bbox, gt, names)


# -- synthetic scenes -------------------------------------------------------

SHAPES = ("sphere", "torus", "box")
SPHERE_RADIUS = 0.5
TORUS_RADII = (0.45, 0.18)
BOX_HALF = 0.4


def shape_sdf(shape: str, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if shape == "sphere":
        return np.linalg.norm(p, axis=-1) - SPHERE_RADIUS
    if shape == "torus":
        R, r = TORUS_RADII
        q = np.stack([np.linalg.norm(p[..., :2], axis=-1) - R, p[..., 2]], -1)
        return np.linalg.norm(q, axis=-1) - r
    if shape == "box":
        q = np.abs(p) - BOX_HALF
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
    raise SceneError(f"unknown shape '{shape}' (choose from {', '.join(SHAPES)})")


def _sdf_normal(shape, p, h=1e-6):
    g = np.stack([shape_sdf(shape, p + h * e) - shape_sdf(shape, p - h * e) for e in np.eye(3)], -1)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def _icosphere(level: int):
    t = (1.0 + 5**0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        e = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(-1, 3) + len(v)
        v = np.vstack([v, mid])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([np.stack([a, m[:, 0], m[:, 2]], 1), np.stack([b, m[:, 1], m[:, 0]], 1),
                            np.stack([c, m[:, 2], m[:, 1]], 1), m])
    return v, f


def _grid_surface(nu, nv, fn, wrap_v=True):
    u = np.arange(nu) / nu * 2 * np.pi
    v = np.arange(nv) / nv * 2 * np.pi
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = fn(uu.ravel(), vv.ravel())
    idx = np.arange(nu * nv).reshape(nu, nv)
    a = idx
    b = np.roll(idx, -1, axis=0)
    c = np.roll(idx, -1, axis=1)
    d = np.roll(b, -1, axis=1)
    tris = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
    return verts, tris


def _box_mesh(n):
    s = np.linspace(-BOX_HALF, BOX_HALF, n + 1)
    verts, tris = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            uu, vv = np.meshgrid(s, s, indexing="ij")
            p = np.zeros(uu.shape + (3,))
            p[..., axis] = sign * BOX_HALF
            p[..., (axis + 1) % 3] = uu
            p[..., (axis + 2) % 3] = vv
            base = sum(len(x) for x in verts)
            idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1) + base
            a, b, c, d = idx[:-1, :-1], idx[1:, :-1], idx[:-1, 1:], idx[1:, 1:]
            t = np.concatenate([np.stack([a, b, d], -1).reshape(-1, 3), np.stack([a, d, c], -1).reshape(-1, 3)])
            if sign < 0:
                t = t[:, [0, 2, 1]]
            verts.append(p.reshape(-1, 3))
            tris.append(t)
    v = np.concatenate(verts)
    # weld duplicated edge vertices
    uniq, inv = np.unique(np.round(v, 12), axis=0, return_inverse=True)
    return uniq, inv.ravel()[np.concatenate(tris)]


def gt_mesh(shape: str) -> TriMesh:
    """Dense triangulation whose vertices lie on the analytic surface."""
    if shape == "sphere":
        v, f = _icosphere(5)
        return TriMesh(v * SPHERE_RADIUS, f)
    if shape == "torus":
        R, r = TORUS_RADII

        def fn(u, w):
            return np.stack([(R + r * np.cos(w)) * np.cos(u), (R + r * np.cos(w)) * np.sin(u), r * np.sin(w)], -1)

        return TriMesh(*_grid_surface(256, 96, fn))
    if shape == "box":
        return TriMesh(*_box_mesh(48))
    raise SceneError(f"unknown shape '{shape}'")


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation and translation (x right, y down, z forward)."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    up = np.asarray(up, float)
    if abs(np.dot(z, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ np.asarray(center, float)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], 1)


def _albedo(p, phase):
    pattern = np.sin(7.0 * p[..., 0] + phase[0]) * np.sin(7.0 * p[..., 1] + phase[1]) * np.sin(7.0 * p[..., 2] + phase[2])
    base = np.array([0.85, 0.55, 0.3])
    alt = np.array([0.25, 0.45, 0.8])
    t = 0.5 + 0.5 * np.tanh(3.0 * pattern)
    return base * t[..., None] + alt * (1.0 - t[..., None])


def _trace(shape, o, d, t_max, steps=256, tol=1e-9):
    t = np.zeros(len(o))
    hit = np.zeros(len(o), dtype=bool)
    live = np.ones(len(o), dtype=bool)
    for _ in range(steps):
        if not live.any():
            break
        idx = np.nonzero(live)[0]
        s = shape_sdf(shape, o[idx] + t[idx, None] * d[idx])
        done = s < tol
        hit[idx[done]] = True
        t[idx[~done]] += s[~done]
        live[idx] = ~done & (t[idx] < t_max)
    return t, hit


def shade(shape, points, view_dirs, phase):
    n = _sdf_normal(shape, points)
    light = np.array([0.5, 0.4, 0.77])
    light /= np.linalg.norm(light)
    lam = np.clip(n @ light, 0.0, None)
    refl = view_dirs - 2.0 * np.sum(view_dirs * n, -1, keepdims=True) * n
    specular = np.clip(refl @ light, 0.0, None) ** 16
    return _albedo(points, phase) * (0.25 + 0.75 * lam[..., None]) + 0.2 * specular[..., None]


def synth_scene(shape: str = "sphere", n_views: int = 20, resolution=(256, 256), seed: int = 0,
                distance: float = 3.0, fov_deg: float = 30.0) -> SceneDataset:
    """Cameras on a view sphere looking at the origin; images ray traced
    against the analytic SDF with textured Lambertian plus specular shading
    over a black background, quantized to 8 bits."""
    if shape not in SHAPES:
        raise SceneError(f"unknown shape '{shape}' (choose from {', '.join(SHAPES)})")
    W, H = int(resolution[0]), int(resolution[1])
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    phase = rng.uniform(0.0, 2.0 * np.pi, 3)
    dirs = fibonacci_sphere(n_views) @ rot.T
    f = 0.5 * W / math.tan(math.radians(fov_deg) / 2.0)
    cams, images = [], []
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for k in range(n_views):
        R, t = look_at(distance * dirs[k], np.zeros(3))
        cam = CameraModel(f, f, W / 2.0, H / 2.0, R, t, W, H)
        o, d = pixel_rays(cam, xs.ravel(), ys.ravel())
        tt, hit = _trace(shape, o, d, t_max=2.0 * distance)
        img = np.zeros((H * W, 3))
        p = o[hit] + tt[hit, None] * d[hit]
        img[hit] = shade(shape, p, d[hit], phase)
        images.append(quantize(img.reshape(H, W, 3)))
        cams.append(cam)
    return SceneDataset(cams, images, np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]), gt_mesh(shape))
