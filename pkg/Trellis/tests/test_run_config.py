import json

import pytest

from conftest import CONFIGS
from run_config import ConfigError, RunConfig, load_run_config


def test_defaults_without_a_file():
    config = load_run_config()
    assert config == RunConfig()
    assert config.search.population_size == 20
    assert config.surrogate.folds == 5


@pytest.mark.parametrize("name", ["default.yaml", "desk.yaml"])
def test_shipped_configs_load(name):
    config = load_run_config(CONFIGS / name)
    assert config.retrain.max_steps >= config.train.max_steps
    assert config.dataset.task == "NC"


def test_desk_config_uses_desk_scale():
    assert load_run_config(CONFIGS / "desk.yaml").model.scale_override == "Desk"


def test_seed_override_reaches_every_component():
    config = load_run_config(CONFIGS / "default.yaml", seed=11)
    assert config.seed == 11
    for part in (config.sbm, config.graph_set, config.train, config.retrain, config.surrogate,
                 config.search):
        assert part.seed == 11


def test_json_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"search": {"generations": 3}, "sample": {"num_samples": 4}}))
    config = load_run_config(path)
    assert config.search.generations == 3
    assert config.sample.num_samples == 4


def test_retrain_budget_below_train_budget(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train: {max_steps: 100, warmup_steps: 10}\n"
                    "retrain: {max_steps: 50, warmup_steps: 10}\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_unknown_section(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("searh: {generations: 3}\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_file_dataset_needs_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("dataset: {kind: file}\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_unreadable_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("search: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.yaml")
