"""Coarse-to-fine reconstruction: render/backprop on a fixed Delaunay mesh,
then up-sample near the surface, re-optimize the CVT and rebuild."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .cvt import CvtConfig, optimize_cvt
from .extract import DEFAULT_CLIP, TriMesh, chamfer, marching_tetrahedra, read_mesh, write_ply
from .field import (FieldState, RegWeights, init_field, normal_smoothing, save_checkpoint, smoothing_matrix,
                    resample, tv_loss, upsample, upsample_edges)
from .geom import CAMERA, FREE, SiteSet, build_kdtree, delaunay, knn_table
from .optim import adam_step
from .render import NetworkParams, RenderConfig, beta_schedule, render_batch
from .scene import SceneDataset, SceneError

log = logging.getLogger(__name__)

CAMERA_MARGIN = 4.0


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class TrainConfig:
    levels: int = 3
    iters_per_level: int = 10000
    batch_rays: int = 4096
    lam_first: float = 1.0
    lam_later: float = 0.5
    eps: float = 0.1
    w_reg: float = 0.1
    w_tv: float = 0.01
    detach_smooth: bool = False
    reg_neighbors: int = 8
    beta0: float = 30.0
    beta_growth: float = 1.3
    beta_cap0: float = 200.0
    literal_alpha: bool = False
    prune_band: float = 4.0
    lr_sdf: float = 0.01
    lr_feat: float = 0.01
    lr_net: float = 1e-3
    lr_decay: float = 0.33
    grid_side: int = 16
    upsample_ratio: float = 1.5
    refinement: str = "adaptive"
    uniform_targets: tuple = ()
    cvt: bool = True
    cvt_iterations: int = 300
    cvt_neighbors: int = 24
    cvt_knn_refresh: int = 100
    cvt_resample: bool = True
    hidden: int = 64
    depth: int = 2
    max_sites: int = 3_000_000
    seed: int = 0

    def __post_init__(self):
        for name in ("levels", "batch_rays", "grid_side", "cvt_iterations", "cvt_neighbors", "cvt_knn_refresh",
                     "hidden", "depth", "reg_neighbors", "max_sites"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iters_per_level < 0:
            raise ValueError("iters_per_level must be >= 0")
        if self.grid_side < 2:
            raise ValueError("grid_side must be >= 2")
        if self.refinement not in ("adaptive", "uniform"):
            raise ValueError("refinement must be 'adaptive' or 'uniform'")
        self.uniform_targets = tuple(int(x) for x in self.uniform_targets)

    def cvt_config(self, level: int) -> CvtConfig:
        return CvtConfig(n_neighbors=self.cvt_neighbors, n_iterations=self.cvt_iterations,
                         knn_refresh_period=self.cvt_knn_refresh, rng_seed=self.seed + 1000 * level)

    def reg_weights(self, level: int) -> RegWeights:
        return RegWeights(self.w_reg, self.w_tv, self.lam_first if level == 0 else self.lam_later, self.eps)

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]


@dataclass
class LevelResult:
    level: int
    sites: SiteSet
    state: FieldState
    mesh: TriMesh
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    params: NetworkParams | None = None


def init_grid(bbox, side: int = 16, cameras=()) -> SiteSet:
    """side^3 cell-center sites over the bbox plus one camera site per camera."""
    if side < 2:
        raise ValueError("side must be >= 2")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in np.asarray(bbox, dtype=np.float64).reshape(2, 3))
    axes = [lo[d] + (np.arange(side) + 0.5) * (hi[d] - lo[d]) / side for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    centers = np.array([c.center for c in cameras]).reshape(-1, 3)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    outside = np.any(np.abs(centers - mid) > CAMERA_MARGIN * half, axis=1)
    if np.any(outside):
        raise SceneError(f"camera {int(np.argmax(outside))} lies outside the enlarged bounding box")
    kind = np.concatenate([np.full(len(grid), FREE), np.full(len(centers), CAMERA)]).astype(np.int8)
    return SiteSet(np.vstack([grid, centers]), kind, 0)


def refine_uniform(sites: SiteSet, state: FieldState, target: int, bbox, seed: int):
    """Grow to ``target`` sites with uniformly random new sites in the bbox.

    New values are inverse-distance averages of the 4 nearest free sites.
    """
    n_new = target - len(sites)
    if n_new <= 0:
        return SiteSet(sites.positions.copy(), sites.kind.copy(), sites.level + 1), state.copy()
    lo, hi = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    rng = np.random.Generator(np.random.Philox(key=seed, counter=[sites.level, 7, 0, 0]))
    new = lo + rng.random((n_new, 3)) * (hi - lo)
    free = np.nonzero(sites.free)[0]
    dist, idx = build_kdtree(sites.positions[free]).query(new, 4)
    w = 1.0 / np.maximum(dist, 1e-12)
    w /= w.sum(axis=1, keepdims=True)
    src = free[idx]

    def blend(a):
        return np.einsum("nk,nk...->n...", w, a[src])

    grown = FieldState(np.concatenate([state.sdf, blend(state.sdf)]),
                       np.concatenate([state.f_cse, blend(state.f_cse)]),
                       np.concatenate([state.f_fine, blend(state.f_fine)]))
    kind = np.concatenate([sites.kind, np.zeros(n_new, dtype=np.int8)])
    return SiteSet(np.vstack([sites.positions, new]), kind, sites.level + 1), grown


class PixelSampler:
    """Uniform random pixels over all views from a counter-based stream."""

    def __init__(self, dataset: SceneDataset, seed: int):
        self.seed = seed
        self.sizes = np.array([c.width * c.height for c in dataset.cameras])
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)])
        self.colors = np.concatenate([img.reshape(-1, 3) for img in dataset.images])
        self.cameras = dataset.cameras
        self.R = np.stack([c.rotation for c in dataset.cameras])
        self.centers = np.stack([c.center for c in dataset.cameras])
        self.K = np.array([[c.fx, c.fy, c.cx, c.cy, c.width] for c in dataset.cameras])

    def batch(self, level: int, iteration: int, n: int):
        rng = np.random.Generator(np.random.Philox(key=self.seed, counter=[level, iteration, 0, 0]))
        ids = rng.integers(0, self.starts[-1], n)
        view = np.searchsorted(self.starts, ids, side="right") - 1
        local = ids - self.starts[view]
        fx, fy, cx, cy, w = self.K[view].T
        x = local % w.astype(np.int64)
        y = local // w.astype(np.int64)
        d = np.stack([(x + 0.5 - cx) / fx, (y + 0.5 - cy) / fy, np.ones(n)], -1)
        d = np.einsum("ni,nij->nj", d, self.R[view])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return view, self.centers[view], d, self.colors[ids], ids


def _site_adam(shape):
    return {"m": np.zeros(shape), "v": np.zeros(shape), "t": 0}


def train(dataset: SceneDataset, cfg: TrainConfig, out_dir=None, progress=None) -> list:
    """Run the level schedule; returns one :class:`LevelResult` per level.

    With ``out_dir`` each level writes ``level_K.vsdf``, ``mesh_level_K.ply``
    and the per-iteration ``loss.csv``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    bbox = dataset.bbox
    sites = init_grid(bbox, cfg.grid_side, dataset.cameras)
    cam_site = np.nonzero(sites.camera)[0]
    state = init_field(sites, bbox, cfg.seed)
    params = NetworkParams.init(cfg.seed, cfg.hidden, cfg.depth)
    net_adam = [dict() for _ in params.arrays()]
    sampler = PixelSampler(dataset, cfg.seed)
    results = []
    loss_rows = []
    global_it = 0
    for level in range(cfg.levels):
        t0 = time.perf_counter()
        if len(sites) > cfg.max_sites:
            raise ValueError(f"site count {len(sites)} exceeds max_sites={cfg.max_sites}")
        mesh = delaunay(sites)
        weights = cfg.reg_weights(level)
        rcfg = RenderConfig(lam=weights.lam, eps=weights.eps, literal_alpha=cfg.literal_alpha,
                            prune_band=cfg.prune_band)
        smoother = smoothing_matrix(knn_table(build_kdtree(sites), cfg.reg_neighbors), sites.positions)
        decay = cfg.lr_decay**level
        adam_sdf, adam_cse, adam_fine = _site_adam(len(sites)), _site_adam(state.f_cse.shape), _site_adam(state.f_fine.shape)
        frozen = ~sites.free
        losses = []
        for it in range(cfg.iters_per_level):
            beta = beta_schedule(global_it, level, cfg.beta0, cfg.beta_growth, cfg.beta_cap0)
            view, origins, dirs, colors, keys = sampler.batch(level, it, cfg.batch_rays)
            res = render_batch(mesh, state, params, origins, dirs, cam_site[view], beta, rcfg, colors, keys)
            # the data term is a sum over the batch, regularizers over the whole mesh
            g_sdf = res.grad_sdf.copy()
            reg = tv = 0.0
            if weights.w_reg > 0:
                reg, g_reg = normal_smoothing(state.sdf, mesh, smoother, detach=cfg.detach_smooth)
                g_sdf += weights.w_reg * g_reg
            if weights.w_tv > 0:
                tv, g_tv = tv_loss(state.sdf, sites.positions, mesh.edges)
                g_sdf += weights.w_tv * g_tv
            loss = res.loss / cfg.batch_rays
            if not (np.isfinite(loss) and np.all(np.isfinite(g_sdf))):
                raise NumericalError(f"non-finite loss or gradient at level {level} iteration {it}")
            g_sdf[frozen] = 0.0
            g_cse = res.grad_cse
            g_fine = res.grad_fine
            g_cse[frozen] = 0.0
            g_fine[frozen] = 0.0
            state.sdf = adam_step(state.sdf, g_sdf, adam_sdf, cfg.lr_sdf * decay)
            state.f_cse = adam_step(state.f_cse, g_cse, adam_cse, cfg.lr_feat * decay)
            state.f_fine = adam_step(state.f_fine, g_fine, adam_fine, cfg.lr_feat * decay)
            arrays = params.arrays()
            for k, (a, g) in enumerate(zip(arrays, res.grad_params)):
                arrays[k][...] = adam_step(a, g, net_adam[k], cfg.lr_net * decay)
            losses.append(loss)
            loss_rows.append((level, it, beta, weights.lam, loss, reg, tv))
            global_it += 1
            if progress is not None:
                progress(level, it, loss)
        tri = marching_tetrahedra(mesh, state.sdf, exclude=sites.camera)
        results.append(LevelResult(level, sites.copy(), state.copy(), tri, losses, 0.0, params.copy()))
        if out is not None:
            save_checkpoint(out / f"level_{level}.vsdf", sites, state)
            write_ply(out / f"mesh_level_{level}.ply", tri)
        log.info("level %d: %d sites, %d triangles", level, len(sites), len(tri))
        if level + 1 < cfg.levels:
            if cfg.refinement == "adaptive":
                sites, state = upsample(mesh, sites, state, cfg.upsample_ratio)
            else:
                if level < len(cfg.uniform_targets):
                    target = cfg.uniform_targets[level]
                else:
                    target = len(sites) + len(upsample_edges(mesh, sites, state.sdf, cfg.upsample_ratio))
                sites, state = refine_uniform(sites, state, target, bbox, cfg.seed)
            if cfg.cvt:
                moved = optimize_cvt(sites, state.sdf, cfg.cvt_config(level), bounds=bbox)
                if cfg.cvt_resample:
                    # keep the learned surface in place rather than letting it ride on the sites
                    state = resample(sites.positions, state, moved.positions)
                sites = moved
        results[-1].seconds = time.perf_counter() - t0
    if out is not None:
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "iteration", "beta", "lambda", "loss", "l_reg", "l_tv"])
            w.writerows(loss_rows)
    return results


def evaluate(pred, gt, clip: float = DEFAULT_CLIP, n_samples: int = 1_000_000, seed: int = 0) -> dict:
    """Clipped Chamfer accuracy/completeness in millimetres (scene units are metres)."""
    pred = read_mesh(pred) if not isinstance(pred, TriMesh) else pred
    gt = read_mesh(gt) if not isinstance(gt, TriMesh) else gt
    acc, compl = chamfer(gt, pred, clip, n_samples, seed)
    return {"acc_mm": 1000.0 * acc, "compl_mm": 1000.0 * compl}
