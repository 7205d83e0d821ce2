"""Central finite-difference checks on small fixed fixtures (30 free sites).

Each function returns the worst relative error over the checked entries,
measured as max|analytic - fd| / max|fd|.
"""

import numpy as np

from vortsdf.cvt import cvt_loss_and_grad, sample_angles
from vortsdf.field import FieldState, normal_smoothing, smoothing_matrix, tv_loss
from vortsdf.geom import build_kdtree, delaunay, knn_table
from vortsdf.render import NetworkParams, RenderConfig, photometric_loss, render_batch


def rel_error(analytic, fd):
    analytic, fd = np.ravel(analytic), np.ravel(fd)
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-12))


def central_diff(f, x, h):
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def sites30(seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (30, 3))


def cvt_error(seed=0):
    pos = sites30(seed)
    sdf = np.linalg.norm(pos, axis=1) - 0.6
    free = np.ones(30, bool)
    table = knn_table(build_kdtree(pos), 24)
    angles = sample_angles(seed, 0, 30)
    box = (np.full(3, -1.0), np.full(3, 1.0))
    diag = np.sqrt(12.0)
    _, g = cvt_loss_and_grad(pos, sdf, table, free, angles, box, diag)
    g = g.copy()
    fd = central_diff(lambda x: cvt_loss_and_grad(x, sdf, table, free, angles, box, diag)[0], pos, 1e-5 * diag)
    return rel_error(g, fd)


def reg_error(seed=0):
    pos = sites30(seed)
    mesh = delaunay(pos)
    S = smoothing_matrix(knn_table(build_kdtree(pos), 8), pos)
    sdf = np.linalg.norm(pos, axis=1) - 0.6 + 0.1 * np.random.default_rng(seed + 1).normal(size=30)
    _, g = normal_smoothing(sdf, mesh, S)
    return rel_error(g, central_diff(lambda x: normal_smoothing(x, mesh, S)[0], sdf, 1e-6))


def tv_error(seed=0):
    pos = sites30(seed)
    mesh = delaunay(pos)
    sdf = np.random.default_rng(seed + 2).normal(size=30)
    _, g = tv_loss(sdf, pos, mesh.edges)
    return rel_error(g, central_diff(lambda x: tv_loss(x, pos, mesh.edges)[0], sdf, 1e-6))


def photometric_error(seed=0):
    rng = np.random.default_rng(seed + 3)
    cg, cf, gt = rng.random((3, 5, 3))
    _, dg, df = photometric_loss(cg, cf, gt, 0.7, 0.1)
    eg = rel_error(dg, central_diff(lambda x: photometric_loss(x, cf, gt, 0.7, 0.1)[0], cg, 1e-6))
    ef = rel_error(df, central_diff(lambda x: photometric_loss(cg, x, gt, 0.7, 0.1)[0], cf, 1e-6))
    return max(eg, ef)


class RenderFixture:
    """30 sites in [-1, 1]^3 around a sphere SDF, one camera vertex, 5 rays."""

    def __init__(self, seed=3, beta=3.0):
        rng = np.random.default_rng(seed)
        cam = np.array([0.1, 0.2, 2.5])
        self.P = np.vstack([rng.uniform(-1, 1, (30, 3)), cam])
        self.cam = 30
        self.mesh = delaunay(self.P)
        self.state = FieldState(np.linalg.norm(self.P, axis=1) - 0.6, 0.5 * rng.normal(size=(31, 8)),
                                0.5 * rng.normal(size=(31, 8)))
        self.params = NetworkParams.init(1, hidden=16)
        d = rng.uniform(-0.4, 0.4, (5, 3)) - cam
        self.dirs = d / np.linalg.norm(d, axis=1)[:, None]
        self.origins = np.repeat(cam[None], 5, 0)
        self.c_gt = rng.random((5, 3))
        # no pruning so FD steps never change the segment set
        self.cfg = RenderConfig(lam=0.7, prune_band=1e9)
        self.beta = beta

    def run(self, state=None, params=None):
        return render_batch(self.mesh, state or self.state, params or self.params, self.origins, self.dirs,
                            [self.cam] * 5, self.beta, self.cfg, self.c_gt)

    def loss(self, state=None, params=None):
        return self.run(state, params).loss


def render_errors(h=1e-6, max_param_entries=40):
    """Worst relative error per parameter class of the full render backward."""
    fx = RenderFixture()
    out = fx.run()
    errs = {}

    def field_fd(name):
        def f(x):
            st = fx.state.copy()
            getattr(st, name)[:] = x
            return fx.loss(st)
        return central_diff(f, getattr(fx.state, name), h)

    errs["sdf"] = rel_error(out.grad_sdf, field_fd("sdf"))
    errs["f_cse"] = rel_error(out.grad_cse, field_fd("f_cse"))
    errs["f_fine"] = rel_error(out.grad_fine, field_fd("f_fine"))
    worst = 0.0
    for j, a in enumerate(fx.params.arrays()):
        n = min(a.size, max_param_entries)
        fd = np.empty(n)
        for q in range(n):
            vals = []
            for sgn in (1.0, -1.0):
                p = fx.params.copy()
                p.arrays()[j].reshape(-1)[q] += sgn * h
                vals.append(fx.loss(params=p))
            fd[q] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, rel_error(out.grad_params[j].reshape(-1)[:n], fd))
    errs["params"] = worst
    return errs
