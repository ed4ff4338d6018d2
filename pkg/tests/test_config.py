import pytest

from layergrasp.config import (OUTPUT_ROOT_ENV, config_from_document, config_hash, echo_config, load_config,
                               with_overrides)
from layergrasp.error_types import ConfigError, ConfigParseError, ConfigValidationError


def test_defaults_follow_training_table(default_config):
    sac = default_config.sac
    assert (sac.lr, sac.gradient_steps, sac.buffer_size, sac.learning_starts) == (0.003, 3, 10000, 10)
    assert (sac.gamma, sac.batch_size, sac.alpha) == (0.99, 64, 0.2)
    assert default_config.episodes == 3000
    assert default_config.num_envs == 2
    assert default_config.scenarios == ('printer_book', 'winter_fabric')
    assert default_config.seeds == (0, 1, 2)
    assert load_config(None) == default_config


def test_packaged_material_profiles(default_config):
    printer = default_config.sim.materials['printer']
    fabric = default_config.sim.materials['winter_fabric']
    assert printer.depth_noise > fabric.depth_noise
    assert printer.u_opt < fabric.u_opt
    assert printer.f_hi - printer.f_lo < fabric.f_hi - fabric.f_lo
    assert default_config.sim.scenarios['printer_book'].layers == 60


def test_overrides_merge_over_defaults():
    config = config_from_document({'sac': {'batch_size': 16}, 'sim': {'materials': {'printer': {'adhesion': 0.1}}}})
    assert config.sac.batch_size == 16
    assert config.sac.lr == 0.003
    assert config.sim.materials['printer'].adhesion == 0.1
    assert config.sim.materials['printer'].u_opt == 1.0


@pytest.mark.parametrize("document, key", [
    ({'sac': {'batch_size': 0}}, 'sac.batch_size'),
    ({'sac': {'buffer_size': 8, 'batch_size': 16}}, 'sac.buffer_size'),
    ({'sac': {'gamma': 1.5}}, 'sac.gamma'),
    ({'sac': {'lr': 'fast'}}, 'sac.lr'),
    ({'sac': {'optimiser': 'sgd'}}, 'sac.optimiser'),
    ({'slip': {'planner': 'magic'}}, 'slip.planner'),
    ({'mode': 'XX'}, 'mode'),
    ({'scenarios': ['marble_slab']}, 'scenarios'),
    ({'seeds': [0, 'one']}, 'seeds[1]'),
    ({'deterministic': 'yes'}, 'deterministic'),
    ({'sim': {'materials': {'printer': {'colour': 'white'}}}}, 'sim.materials.printer.colour'),
])
def test_validation_names_the_key(document, key):
    with pytest.raises(ConfigValidationError) as info:
        config_from_document(document)
    assert info.value.key == key
    assert str(info.value).startswith(f"{key}: ")
    assert info.value.exit_code == 2


def test_malformed_yaml_reports_line(tmp_path):
    path = tmp_path / 'bad.yaml'
    path.write_text('sac:\n  lr: 0.1\n  batch_size: [1, 2\nepisodes: 4\n')
    with pytest.raises(ConfigParseError) as info:
        load_config(str(path))
    assert info.value.line is not None and info.value.line >= 3
    assert 'at line' in str(info.value)


def test_top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / 'list.yaml'
    path.write_text('- 1\n- 2\n')
    with pytest.raises(ConfigParseError):
        load_config(str(path))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / 'absent.yaml'))


def test_empty_file_gives_defaults(tmp_path, default_config):
    path = tmp_path / 'empty.yaml'
    path.write_text('')
    assert load_config(str(path)) == default_config


def test_echoed_config_reloads_identically(tmp_path, small_config):
    path = echo_config(small_config, str(tmp_path))
    assert path.endswith('config.yaml')
    reloaded = load_config(path)
    assert reloaded == small_config
    assert config_hash(reloaded) == config_hash(small_config)


def test_hash_tracks_content(default_config):
    assert config_hash(default_config) == config_hash(config_from_document({}))
    assert len(config_hash(default_config)) == 64
    assert config_hash(with_overrides(default_config, mode='NT')) != config_hash(default_config)


def test_with_overrides_revalidates(default_config):
    assert with_overrides(default_config, episodes=5).episodes == 5
    with pytest.raises(ConfigValidationError):
        with_overrides(default_config, num_envs=0)


def test_output_root_environment_override(default_config, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert default_config.output_root_resolved() == 'runs'
    monkeypatch.setenv(OUTPUT_ROOT_ENV, '/tmp/elsewhere')
    assert default_config.output_root_resolved() == '/tmp/elsewhere'
