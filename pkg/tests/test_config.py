import pytest

from voxsynth.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    parse_config,
    serialize_config,
)
from voxsynth.phantom import default_spec


def test_defaults_roundtrip_byte_identical():
    cfg = RunConfig()
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.phantom == default_spec()
    assert cfg.codec.n_c == 64
    assert cfg.diffusion.steps == 16


def test_partial_config_overrides_only_named_keys():
    cfg = parse_config("[codec]\niterations = 77\n\n[run]\nseed = 9\n")
    assert cfg.codec.iterations == 77
    assert cfg.run.seed == 9
    assert cfg.codec.n_c == 64


def test_unknown_key_reports_line_number():
    text = "[codec]\nn_c = 64\nwibble = 3\n"
    with pytest.raises(ConfigError, match="line 3"):
        parse_config(text)


def test_unknown_section_reports_line_number():
    with pytest.raises(ConfigError, match=r"line 2.*wrong"):
        parse_config("[wrong]\nkey = 1\n")


def test_parse_error_reports_line_number():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("[codec]\nn_c = sixty-four\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("loose_key = 1\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("[codec]\nn_c = 3\nn_c = 4\n")


def test_phantom_region_roundtrip():
    cfg = RunConfig()
    text = serialize_config(cfg)
    assert "[phantom.region.1]" in text
    assert "[phantom.region.6]" in text
    again = parse_config(text)
    assert again.phantom.regions == cfg.phantom.regions


def test_phantom_regions_must_be_contiguous():
    base = serialize_config(RunConfig())
    broken = base.replace("[phantom.region.6]", "[phantom.region.9]")
    with pytest.raises(ConfigError, match="contiguous"):
        parse_config(broken)


def test_invalid_geometry_rejected():
    text = (
        "[phantom]\ngrid = 8,8,8\n\n"
        "[phantom.region.1]\ncenter = 4,4,4\nbase_radii = 9,2,2\nintensity = 0.8\n"
    )
    with pytest.raises(ConfigError, match="geometry"):
        parse_config(text)


def test_overrides_apply_and_validate():
    cfg = apply_overrides(RunConfig(), ["codec.iterations=123", "run.seed=4"])
    assert cfg.codec.iterations == 123
    assert cfg.run.seed == 4
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["no_dot=8"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["codec.bogus=8"])


def test_comments_and_blank_lines_ignored():
    cfg = parse_config("# a comment\n\n[run]\n# another\nseed = 3\n")
    assert cfg.run.seed == 3
