import json

import pytest

from slothlab.config import ConfigError, ExperimentConfig, config_from_dict, default_attacks, load_config


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.policy.rad_budgets == [0.05, 0.15]
    assert [a.name for a in cfg.attacks] == [a.name for a in default_attacks()]
    assert cfg.attacks[-1].eps == 0.03


def test_nested_sections_are_built():
    cfg = config_from_dict({"data": {"n": 100}, "attacks": [{"name": "a", "norm": "l1"}],
                            "transfer": {"surrogate": {"hidden": 5}}})
    assert cfg.data.n == 100
    assert cfg.attacks[0].eps == 0.67
    assert cfg.transfer.surrogate.hidden == 5


@pytest.mark.parametrize("raw", [
    {"seeed": 1},
    {"data": {"classes": 3}},
    {"attacks": [{"name": "a", "epsilom": 0.1}]},
    {"attacks": [{"name": "a", "overrides": {"iters": 3}}]},
    {"transfer": {"surrogate": {"depth": 3}}},
])
def test_unknown_keys_are_rejected(raw):
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict(raw)


@pytest.mark.parametrize("raw", [
    {"attacks": [{"name": "a"}, {"name": "a"}]},
    {"attacks": [{"name": "a", "kind": "pgd", "norm": "l2"}]},
    {"attacks": [{"name": "a", "kind": "cw"}]},
    {"policy": {"criterion": "margin"}},
    {"policy": {"rad_budgets": [1.5]}},
    {"advtrain": {"regimes": ["fgsm"]}},
    {"transfer": {"scenarios": ["same_domain"]}},
    {"partition": {"split_exit": 0}},
    {"data": "big"},
    {"attacks": {"name": "a"}},
])
def test_invalid_values_are_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4}))
    assert load_config(path).seed == 4
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_json_round_trip():
    cfg = ExperimentConfig().validate()
    assert config_from_dict(cfg.to_json()) == cfg
