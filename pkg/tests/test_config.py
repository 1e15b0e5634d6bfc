"""Flat key = value configuration: schema, parsing, and builders."""

import pytest

from gamreid.config import (SCHEMA, aug_spec_from, backbone_config_from,
                            defaults, describe_keys, image_size_from,
                            load_config, merge_schedule_from,
                            parse_config_text, render_config,
                            synth_spec_from, train_config_from)
from gamreid.errors import ConfigError


def test_defaults_cover_every_schema_key():
    d = defaults()
    assert set(d) == set(SCHEMA)
    assert d["train.batch_size"] == 32
    assert d["train.tau"] == 0.1
    assert d["merge.fraction"] == 0.04
    assert d["backbone.preset"] == "tiny"


def test_parse_overlays_only_named_keys():
    got = parse_config_text("train.tau = 0.2\n\n# comment\nsynth.seed = 9\n")
    assert got == {"train.tau": 0.2, "synth.seed": 9}


def test_parse_tolerates_spacing_and_comments():
    got = parse_config_text("   train.batch_size=64   \n#train.tau = 9\n")
    assert got == {"train.batch_size": 64}


def test_unknown_key_error_names_file_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text("train.tau = 0.1\nno.such.key = 1\n", source="run.cfg")
    msg = str(err.value)
    assert "run.cfg:2" in msg and "no.such.key" in msg


def test_bad_value_error_names_file_and_line():
    with pytest.raises(ConfigError) as err:
        parse_config_text("train.batch_size = many\n", source="run.cfg")
    assert "run.cfg:1" in str(err.value)
    with pytest.raises(ConfigError) as err:
        parse_config_text("just a line without equals\n", source="x.cfg")
    assert "x.cfg:1" in str(err.value)


def test_int_keys_reject_float_text():
    with pytest.raises(ConfigError):
        parse_config_text("train.batch_size = 32.5\n")


def test_render_round_trips_through_parse():
    resolved = defaults()
    resolved["train.tau"] = 0.30000000000000004
    resolved["synth.split_mode"] = "shared"
    text = render_config(resolved)
    back = defaults()
    back.update(parse_config_text(text))
    assert back == resolved
    assert render_config(back) == text


def test_render_is_sorted_and_complete():
    text = render_config(defaults())
    lines = [l for l in text.splitlines() if l]
    assert lines == sorted(lines)
    assert len(lines) == len(SCHEMA)


def test_load_config_reads_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("train.seed = 3\nbackbone.preset = resnet50-gam\n")
    resolved = load_config(str(p))
    assert resolved["train.seed"] == 3
    assert resolved["backbone.preset"] == "resnet50-gam"
    assert resolved["train.tau"] == 0.1
    assert load_config(None) == defaults()


def test_describe_keys_lists_all():
    text = describe_keys()
    for key in SCHEMA:
        assert key in text


def test_builders_produce_validated_objects():
    resolved = defaults()
    assert backbone_config_from(resolved).use_gam
    assert train_config_from(resolved).batch_size == 32
    assert aug_spec_from(resolved).flip_prob == 0.5
    assert merge_schedule_from(resolved).merge_fraction == 0.04
    assert synth_spec_from(resolved).num_identities == 16
    resolved["backbone.groups"] = 8
    assert backbone_config_from(resolved).groups == 8
    resolved["train.tau"] = -1.0
    with pytest.raises(ConfigError):
        train_config_from(resolved)


def test_image_size_pairing():
    resolved = defaults()
    assert image_size_from(resolved) is None
    resolved["data.height"] = 64
    with pytest.raises(ConfigError):
        image_size_from(resolved)
    resolved["data.width"] = 32
    assert image_size_from(resolved) == (64, 32)
    resolved["data.height"] = -1
    with pytest.raises(ConfigError):
        image_size_from(resolved)
