import numpy as np
import pytest

from greenwave.autodiff import Tensor
from greenwave.checkpoint import (CheckpointError, compatibility_diff, load_bundle,
                                  require_compatible, save_bundle)
from greenwave.evaluation import ModelBundle
from greenwave.model import ModelConfig, init_params
from greenwave.sim import OBS_DIM, PHASES
from greenwave.topology import grid_network


def tiny_bundle(variant="full", **overrides):
    config = ModelConfig(num_agents=4, hidden_dim=8, heads=2, encoder_layers=1,
                         graph_layers=1, context=3, **overrides)
    return ModelBundle(params=init_params(config, seed=3), config=config,
                       r_max=123.5, variant=variant)


def test_round_trip_preserves_everything(tmp_path):
    bundle = tiny_bundle(variant="no_rtg", use_rtg=False)
    path = str(tmp_path / "model.npz")
    save_bundle(path, bundle)
    loaded = load_bundle(path)
    assert loaded.config == bundle.config
    assert loaded.r_max == 123.5
    assert loaded.variant == "no_rtg"
    assert set(loaded.params) == set(bundle.params)
    for name, tensor in bundle.params.items():
        assert np.array_equal(loaded.params[name].data, tensor.data)
        assert loaded.params[name].requires_grad


def test_save_leaves_no_temp_file(tmp_path):
    path = str(tmp_path / "model.npz")
    save_bundle(path, tiny_bundle())
    assert [p.name for p in tmp_path.iterdir()] == ["model.npz"]


def test_save_overwrites_existing(tmp_path):
    path = str(tmp_path / "model.npz")
    save_bundle(path, tiny_bundle())
    save_bundle(path, tiny_bundle(variant="independent_dt",
                                  use_graph_attention=False))
    assert load_bundle(path).variant == "independent_dt"


def test_load_rejects_non_checkpoint(tmp_path):
    path = tmp_path / "junk.npz"
    np.savez(path, a=np.zeros(3))
    with pytest.raises(CheckpointError, match="missing"):
        load_bundle(str(path))


def test_load_rejects_future_format(tmp_path):
    bundle = tiny_bundle()
    path = str(tmp_path / "model.npz")
    save_bundle(path, bundle)
    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}
    arrays["__format_version__"] = np.array(99)
    np.savez(path, **arrays)
    with pytest.raises(CheckpointError, match="format version 99"):
        load_bundle(path)


def test_metadata_name_collision_refused(tmp_path):
    bundle = tiny_bundle()
    bundle.params["__config__"] = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(CheckpointError, match="collides"):
        save_bundle(str(tmp_path / "model.npz"), bundle)


def test_compatibility_diff_empty_when_matching():
    bundle = tiny_bundle()
    network = grid_network(2, 2)
    assert compatibility_diff(bundle.config, network, OBS_DIM, PHASES) == []
    require_compatible(bundle, network, OBS_DIM, PHASES)


def test_mismatch_lists_every_differing_field():
    bundle = tiny_bundle()
    network = grid_network(3, 3)
    diff = compatibility_diff(bundle.config, network, obs_dim=21, num_phases=PHASES)
    assert len(diff) == 2
    assert any("num_agents" in line and "4" in line and "9" in line for line in diff)
    assert any("obs_dim" in line for line in diff)
    with pytest.raises(CheckpointError, match="num_agents"):
        require_compatible(bundle, network, 21, PHASES)
