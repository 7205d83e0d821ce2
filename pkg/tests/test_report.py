import numpy as np

from vortsdf.pipeline import TrainConfig, evaluate, train
from vortsdf.report import plot_cvt, read_csv, write_csv, write_report
from vortsdf.scene import synth_scene


def _png(p):
    return p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 2.5], [3, 4]])
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["x", "y"] and rows == [["1", "2.5"], ["3", "4"]]


def test_cvt_plot(tmp_path):
    write_csv(tmp_path / "h.csv", ["iteration", "loss"], [[i, 1.0 / (i + 1)] for i in range(20)])
    plot_cvt(tmp_path / "h.csv", tmp_path / "h.png")
    assert _png(tmp_path / "h.png")


def test_report_writes_figures_and_tables(tmp_path):
    ds = synth_scene("sphere", 3, (24, 24), seed=0)
    cfg = TrainConfig(levels=2, iters_per_level=3, batch_rays=32, grid_side=6, cvt_iterations=3, hidden=8)
    res = train(ds, cfg, tmp_path)
    metrics = {r.level: evaluate(r.mesh, ds.gt_mesh, n_samples=2000) for r in res}
    written = write_report(tmp_path, res, ds, metrics, beta=30.0)
    names = {p.name for p in written}
    assert names == {"levels.csv", "levels.png", "loss.png", "view_000.png"}
    assert all(_png(p) for p in written if p.suffix == ".png")
    header, rows = read_csv(tmp_path / "levels.csv")
    assert header[:2] == ["level", "sites"] and len(rows) == 2
    assert int(rows[1][1]) == len(res[1].sites)
    assert np.isclose(float(rows[0][4]), metrics[0]["acc_mm"], atol=1e-4)
