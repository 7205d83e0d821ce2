import pytest

from vortsdf.config import ConfigError, dump_config, load_config, parse_config
from vortsdf.pipeline import TrainConfig


def test_defaults_from_empty():
    assert parse_config("") == TrainConfig()


def test_values_and_comments():
    cfg = parse_config("# header\nlevels = 2\n\nbatch_rays = 1_024  # trailing\ncvt = no\nuniform_targets = 10, 20\n"
                       "refinement = uniform\nbeta0 = 12.5\n")
    assert cfg.levels == 2 and cfg.batch_rays == 1024 and cfg.cvt is False
    assert cfg.uniform_targets == (10, 20) and cfg.refinement == "uniform" and cfg.beta0 == 12.5


@pytest.mark.parametrize("text,line,fragment", [
    ("levels = 2\nbogus = 1\n", 2, "unknown key"),
    ("\n\nlevels 3\n", 3, "key = value"),
    ("cvt = maybe\n", 1, "not a boolean"),
    ("levels = two\n", 1, "levels"),
])
def test_errors_name_file_and_line(text, line, fragment):
    with pytest.raises(ConfigError) as ei:
        parse_config(text, "run.cfg")
    assert f"run.cfg:{line}" in str(ei.value) and fragment in str(ei.value)


def test_invalid_value_rejected():
    with pytest.raises(ConfigError, match="levels"):
        parse_config("levels = 0\n")


def test_overrides_skip_none():
    cfg = parse_config("levels = 2\n", overrides={"levels": None, "seed": 5})
    assert cfg.levels == 2 and cfg.seed == 5


def test_round_trip(tmp_path):
    cfg = TrainConfig(levels=4, cvt=False, uniform_targets=(5, 6), literal_alpha=True, lr_sdf=3e-3)
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.cfg")
