import json

import pytest

from greenwave.config import (OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig,
                              apply_overrides, desk_profile, full_profile,
                              load_config, resolve_path)


def test_desk_profile_builds_typed_configs():
    config = load_config()
    network = config.build_network()
    assert network.num_intersections == 9
    model = config.model_config(network)
    assert (model.hidden_dim, model.encoder_layers, model.graph_layers,
            model.context) == (32, 2, 1, 10)
    train = config.train_config()
    assert train.epochs == 20 and train.window_stride == 10
    assert config.eval_config().episodes == 10
    assert config.sim_config().episode_length == 3600


def test_full_profile_dimensions():
    config = load_config(profile="full")
    model = config.model_config(config.build_network())
    assert (model.hidden_dim, model.heads, model.encoder_layers,
            model.graph_layers, model.context) == (128, 4, 3, 2, 20)
    train = config.train_config()
    assert (train.lr, train.warmup_steps, train.epochs) == (1e-4, 1000, 100)
    assert config.eval_config().seeds == (0, 1, 2, 3, 4)
    assert config.episodes == 1000


def test_demand_mix_must_sum_to_one():
    with pytest.raises(ConfigError, match="sum"):
        ExperimentConfig(demand_mix={"low": 0.5, "nominal": 0.6})
    with pytest.raises(ConfigError, match="regimes"):
        ExperimentConfig(demand_mix={"rush_hour": 1.0})


def test_overrides_parse_json_values():
    data = apply_overrides(desk_profile(), [
        "model.hidden_dim=64", "train.lr=0.001", "eval.seeds=[3,4]",
        "dataset_path=other.jsonl", "policy.kind=mixture",
    ])
    assert data["model"]["hidden_dim"] == 64
    assert data["train"]["lr"] == 0.001
    assert data["eval"]["seeds"] == [3, 4]
    assert data["dataset_path"] == "other.jsonl"
    assert data["policy"]["kind"] == "mixture"


def test_override_requires_equals_sign():
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides(desk_profile(), ["model.hidden_dim"])


def test_config_file_merges_over_profile(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"seed": 7, "model": {"hidden_dim": 48}}))
    config = load_config(str(path))
    assert config.seed == 7
    assert config.model["hidden_dim"] == 48
    assert config.model["context"] == 10  # untouched profile default


def test_flag_overrides_beat_config_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"seed": 7}))
    assert load_config(str(path), overrides=["seed=11"]).seed == 11


def test_unknown_top_level_field_rejected(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(str(path))


def test_unknown_network_kind_rejected():
    config = ExperimentConfig(network={"kind": "ring", "size": 4})
    with pytest.raises(ConfigError, match="ring"):
        config.build_network()


def test_unknown_profile_rejected():
    with pytest.raises(ConfigError, match="profile"):
        load_config(profile="cluster")


def test_full_profile_is_valid():
    ExperimentConfig(**full_profile())


def test_resolve_path_uses_output_root(monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, "/data/runs")
    assert resolve_path("reports/a.txt") == "/data/runs/reports/a.txt"
    assert resolve_path("/abs/b.txt") == "/abs/b.txt"
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert resolve_path("reports/a.txt") == "./reports/a.txt"
