import json

import pytest

from maskedmotion import config as cfgmod


def test_defaults_resolve_and_build():
    cfg = cfgmod.resolve()
    assert cfg["tokenizer"]["K"] == 512
    assert cfg["schedule"]["kind"] == "cosine"
    cfgmod.data_config(cfg).validate()
    cfgmod.tokenizer_config(cfg).validate()
    cfgmod.transformer_config(cfg).validate()
    cfgmod.schedule_config(cfg).validate()
    cfgmod.sampling_strategy(cfg).validate()


def test_unknown_keys_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tokenizer": {"codebook_size": 8}}))
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(bad)
    bad.write_text(json.dumps({"tokenzier": {}}))
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(bad)
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(None, {"sampling.nope": 1})


def test_precedence_cli_over_file_over_defaults(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"schedule": {"T": 20}, "tokenizer": {"K": 64}}))
    cfg = cfgmod.resolve(f, {"schedule.T": 7})
    assert cfg["schedule"]["T"] == 7          # flag wins
    assert cfg["tokenizer"]["K"] == 64        # file beats default
    assert cfg["sampling"]["beta"] == 1.0     # untouched default


def test_hash_stable_and_sensitive():
    a = cfgmod.config_hash(cfgmod.resolve())
    b = cfgmod.config_hash(cfgmod.resolve())
    c = cfgmod.config_hash(cfgmod.resolve(None, {"schedule.T": 9}))
    assert a == b
    assert a != c
    assert len(a) == 16
