import pytest

from vortsdf.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from vortsdf.pipeline import NumericalError


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--views", "3", "--res", "24", "24", "--out", str(d)]) == EXIT_OK
    return d


def test_synth_writes_scene(scene_dir):
    assert (scene_dir / "scene.json").is_file()
    assert len(list(scene_dir.rglob("*.png"))) == 3


def test_reconstruct_and_eval(scene_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("grid_side = 6\ncvt_iterations = 3\nhidden = 8\n")
    out = tmp_path / "out"
    rc = main(["reconstruct", "--scene", str(scene_dir), "--config", str(cfg), "--out", str(out),
               "--levels", "2", "--iters", "3", "--batch", "32", "--eval-samples", "2000"])
    assert rc == EXIT_OK
    for name in ("config.txt", "loss.csv", "levels.csv", "loss.png", "levels.png", "view_000.png",
                 "level_1.vsdf", "mesh_level_1.ply"):
        assert (out / name).is_file(), name
    assert "levels = 2" in (out / "config.txt").read_text()
    capsys.readouterr()
    gt = next(scene_dir.rglob("*.ply"))
    rc = main(["eval", "--pred", str(gt), "--gt", str(gt), "--samples", "2000", "--csv", str(tmp_path / "m.csv")])
    assert rc == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "acc_mm,compl_mm"
    assert (tmp_path / "m.csv").read_text().startswith("acc_mm,compl_mm")


def test_cvt_bench(tmp_path, capsys):
    assert main(["cvt-bench", "--sites", "125", "--iters", "5", "--out", str(tmp_path)]) == EXIT_OK
    assert "sites=125" in capsys.readouterr().out
    assert (tmp_path / "cvt_bench.csv").is_file() and (tmp_path / "cvt_bench.png").is_file()


def test_input_errors_exit_2(tmp_path, scene_dir, capsys):
    assert main(["reconstruct", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    bad = tmp_path / "bad.cfg"
    bad.write_text("levels = 2\nwhat = 1\n")
    assert main(["reconstruct", "--scene", str(scene_dir), "--config", str(bad), "--out", str(tmp_path / "o")]) \
        == EXIT_INPUT
    assert "bad.cfg:2" in capsys.readouterr().err


def test_numerical_failure_exit_3(scene_dir, tmp_path, monkeypatch, capsys):
    import vortsdf.cli as cli

    def boom(*a, **k):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["reconstruct", "--scene", str(scene_dir), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
