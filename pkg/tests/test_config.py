import dataclasses

import pytest
from hypothesis import given, strategies as st

from tetsdf.config import Config, ConfigError, echo_config, keys, load_config, parse_config


def test_parse_types_and_comments():
    text = ("# comment line\n\npreset = box   # trailing comment\nwidth = 64\n"
            "background = 1 0.5 0\nprune = false\nlr_sdf = 2e-3\n")
    cfg = parse_config(text)
    assert cfg.preset == "box" and cfg.width == 64
    assert cfg.background == (1.0, 0.5, 0.0)
    assert cfg.prune is False and cfg.lr_sdf == 2e-3
    assert cfg.height == Config().height  # untouched keys keep their defaults


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"<config>:2: unknown key 'widht'") as info:
        parse_config("width = 3\nwidht = 4\n")
    assert info.value.key == "widht"


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key 'seed'"):
        parse_config("seed = 1\nseed = 2\n")


@pytest.mark.parametrize("text,key", [
    ("width = abc", "width"), ("width = 0", "width"), ("background = 1 2", "background"),
    ("background = 2 0 0", "background"), ("prune = maybe", "prune"),
    ("preset = teapot", "preset"), ("lr_sdf = -1", "lr_sdf"), ("lr_sdf = nan", "lr_sdf"),
    ("densify_end = 10\ndensify_start = 20", "densify_end"),
    ("iterations = 100", "densify_end"), ("sh_degree = 3", "sh_degree"),
])
def test_invalid_values_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key
    assert key in str(info.value)


def test_missing_equals():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("width 3\n")


def test_overrides_apply_last():
    cfg = parse_config("seed = 1\n", overrides=["seed=7", "width = 9"])
    assert cfg.seed == 7 and cfg.width == 9


def test_echo_is_verbatim(tmp_path):
    text = "# keep me\nwidth = 32   # and me\n\n\nseed=3\n"
    cfg = parse_config(text)
    echo_config(cfg, tmp_path)
    assert (tmp_path / "config.txt").read_text() == text
    resolved = (tmp_path / "config.resolved.txt").read_text()
    back = parse_config(resolved)
    assert dataclasses.replace(back, source="") == dataclasses.replace(cfg, source="")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "none.cfg")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.cfg")):
        cfg = load_config(p)
        assert cfg.iterations == 3000


@given(st.integers(1, 4096), st.integers(0, 10**6), st.booleans())
def test_resolved_round_trip(width, seed, cull):
    cfg = parse_config(f"width = {width}\nseed = {seed}\ncull = {str(cull).lower()}\n")
    back = parse_config(cfg.resolved_text())
    for k in keys():
        assert getattr(back, k) == getattr(cfg, k)
