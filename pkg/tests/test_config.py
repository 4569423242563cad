import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from duplexfit.config import ConfigError, RunConfig, describe_keys, from_dict, load_config, validate_config


def test_empty_text_gives_defaults():
    assert validate_config("") == RunConfig()


def test_negative_epsilon_names_key():
    with pytest.raises(ConfigError) as e:
        validate_config("epsilon = -1")
    assert e.value.key == "epsilon"


@pytest.mark.parametrize("text,key", [
    ("n_samples = 1", "n_samples"),
    ("w_photo = -0.5", "w_photo"),
    ("bogus = 3", "bogus"),
    ("iterations = 2.5", "iterations"),
    ("factorized = 1", "factorized"),
    ("texture = 'blue'", "texture"),
    ("split = '10/10'", "split"),
    ("epsilon = nan", "epsilon"),
    ("[fit]\niterations = 3", "fit"),
])
def test_invalid_values_rejected(text, key):
    with pytest.raises(ConfigError) as e:
        validate_config(text)
    assert e.value.key == key


def test_malformed_toml():
    with pytest.raises(ConfigError):
        validate_config("epsilon = = 2")


def test_resolved_echo_is_fixed_point():
    cfg = validate_config("epsilon = 0.03\nseed = 9\nfactorized = false\nsplit = '15/10'\nw_kp = 0")
    assert cfg.epsilon == 0.03 and cfg.w_kp == 0.0 and isinstance(cfg.w_kp, float)
    again = validate_config(cfg.to_toml())
    assert again == cfg
    assert validate_config(again.to_toml()).to_toml() == cfg.to_toml()


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(2, 64), st.floats(0, 10), st.integers(0, 2 ** 31 - 1),
       st.booleans())
def test_roundtrip_property(eps, ns, w, seed, fac):
    cfg = RunConfig().replace(epsilon=eps, n_samples=ns, w_mask=w, seed=seed, factorized=fac)
    assert validate_config(cfg.to_toml()) == cfg


def test_help_documents_every_key():
    text = describe_keys()
    for f in dataclasses.fields(RunConfig):
        assert f"  {f.name} (default" in text
    assert "[canonical units]" in text and "[px]" in text


def test_load_with_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("iterations = 10\n")
    cfg = load_config(p, {"seed": 4})
    assert cfg.iterations == 10 and cfg.seed == 4
    with pytest.raises(ConfigError):
        load_config(p, {"seed": "x"})


def test_split_blocks():
    assert RunConfig().split_blocks == (15, 5)
    assert from_dict({"split": "15/15"}).split_blocks == (15, 15)
