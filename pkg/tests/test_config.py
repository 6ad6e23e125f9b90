import json

import pytest

from rkto.config import RunConfig, from_dict, load_config, resolve_key, with_override
from rkto.exceptions import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    again = from_dict(json.loads(cfg.dumps()))
    assert again.dumps() == cfg.dumps()


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    assert load_config(p).dumps() == RunConfig().dumps()


@pytest.mark.parametrize("raw, key", [({"bogus": {}}, "bogus"), ({"train": {"nope": 1}}, "train.nope"),
                                      ({"policy": {"mode": "deep"}}, "policy.mode"),
                                      ({"train": {"batch_size": 0}}, "train"),
                                      ({"run": {"schedule": "x"}}, "run.schedule")])
def test_invalid_keys_name_the_key(raw, key):
    with pytest.raises(ConfigError) as err:
        from_dict(raw)
    assert err.value.key == key


def test_unparseable_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train: [unclosed")
    with pytest.raises(ConfigError):
        load_config(p)


def test_resolve_key():
    assert resolve_key("train.mc_samples") == ("train", "mc_samples")
    assert resolve_key("mc_samples") == ("train", "mc_samples")
    assert resolve_key("lambda_ref") == ("reward", "lambda_ref")
    with pytest.raises(ConfigError):
        resolve_key("seed")  # several sections own a seed
    with pytest.raises(ConfigError):
        resolve_key("train.nothing")


def test_override_is_validated_copy():
    cfg = RunConfig()
    new = with_override(cfg, "w_max", 3.0)
    assert new.reward.w_max == 3.0 and cfg.reward.w_max == 10.0
    with pytest.raises(ConfigError):
        with_override(cfg, "w_max", -1.0)


def test_exponent_without_dot_is_a_number(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  sft_lr: 1e-2\n  rkto_lr: 5e-3\nreward:\n  w_max: 4\n")
    cfg = load_config(p)
    assert cfg.train.sft_lr == 0.01 and cfg.train.rkto_lr == 0.005
    assert isinstance(cfg.reward.w_max, float)
    with pytest.raises(ConfigError) as err:
        from_dict({"train": {"sft_lr": "fast"}})
    assert err.value.key == "train.sft_lr"
