"""Figures and CSV tables written next to a reconstruction."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geom import delaunay  # noqa: E402
from .render import RenderConfig, render_batch  # noqa: E402
from .scene import pixel_rays  # noqa: E402

mpl.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
})


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def plot_loss(loss_csv, out_png) -> None:
    header, rows = read_csv(loss_csv)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    if len(data):
        step = np.arange(len(data))
        for lvl in np.unique(data[:, 0]):
            m = data[:, 0] == lvl
            ax.plot(step[m], data[m, 4], lw=0.8, label=f"level {int(lvl)}")
            # running mean makes the trend readable under batch noise
            k = max(1, int(m.sum()) // 50)
            if k > 1:
                smooth = np.convolve(data[m, 4], np.ones(k) / k, mode="valid")
                ax.plot(step[m][k - 1:], smooth, color="k", lw=0.8)
        ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("iteration")
    ax.set_ylabel("photometric loss")
    fig.savefig(out_png)
    plt.close(fig)


def plot_levels(levels_csv, out_png) -> None:
    header, rows = read_csv(levels_csv)
    col = {h: i for i, h in enumerate(header)}
    lv = [int(r[col["level"]]) for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(7.0, 2.8))
    ax[0].bar(lv, [int(r[col["sites"]]) for r in rows], color="0.5")
    ax[0].set_xlabel("level")
    ax[0].set_ylabel("sites")
    if "acc_mm" in col and all(r[col["acc_mm"]] for r in rows):
        ax[1].plot(lv, [float(r[col["acc_mm"]]) for r in rows], "o-", label="Acc")
        ax[1].plot(lv, [float(r[col["compl_mm"]]) for r in rows], "s--", label="Compl")
        ax[1].legend(frameon=False)
    ax[1].set_xlabel("level")
    ax[1].set_ylabel("distance [mm]")
    for a in ax:
        a.set_xticks(lv)
    fig.savefig(out_png)
    plt.close(fig)


def render_view(level_result, dataset, view: int, beta: float, stride: int = 4, cfg: RenderConfig | None = None):
    """Coarse and fine renderings of one view at 1/stride resolution."""
    cam = dataset.cameras[view]
    ys, xs = np.meshgrid(np.arange(0, cam.height, stride), np.arange(0, cam.width, stride), indexing="ij")
    o, d = pixel_rays(cam, xs.ravel(), ys.ravel())
    sites = level_result.sites
    mesh = delaunay(sites)
    cam_site = np.nonzero(sites.camera)[0][view]
    out = render_batch(mesh, level_result.state, level_result.params, o, d, np.full(len(o), cam_site), beta,
                       cfg or RenderConfig())
    shape = xs.shape + (3,)
    return out.c_geo.reshape(shape), out.c_fine.reshape(shape), dataset.images[view][::stride, ::stride]


def plot_views(images, titles, out_png) -> None:
    fig, ax = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6))
    for a, img, t in zip(np.atleast_1d(ax), images, titles):
        a.imshow(np.clip(img, 0, 1), interpolation="nearest")
        a.set_title(t)
        a.axis("off")
    fig.savefig(out_png)
    plt.close(fig)


def plot_cvt(history_csv, out_png) -> None:
    header, rows = read_csv(history_csv)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(data[:, 0], data[:, 1] / data[0, 1], lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("CVT loss / initial")
    fig.savefig(out_png)
    plt.close(fig)


def write_report(out_dir, results, dataset, metrics, beta: float) -> list:
    """levels.csv plus loss, level and view figures. Returns written paths."""
    out = Path(out_dir)
    rows = []
    for r in results:
        m = metrics.get(r.level, {})
        rows.append([r.level, len(r.sites), len(r.mesh), f"{r.seconds:.2f}",
                     f"{m['acc_mm']:.4f}" if m else "", f"{m['compl_mm']:.4f}" if m else ""])
    write_csv(out / "levels.csv", ["level", "sites", "triangles", "seconds", "acc_mm", "compl_mm"], rows)
    written = [out / "levels.csv"]
    plot_levels(out / "levels.csv", out / "levels.png")
    written.append(out / "levels.png")
    if (out / "loss.csv").is_file():
        plot_loss(out / "loss.csv", out / "loss.png")
        written.append(out / "loss.png")
    last = results[-1]
    if last.params is not None and len(dataset):
        geo, fine, gt = render_view(last, dataset, 0, beta)
        plot_views([gt, geo, fine], ["input", "coarse", "fine"], out / "view_000.png")
        written.append(out / "view_000.png")
    return written
