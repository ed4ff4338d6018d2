import os

import numpy as np
import pytest

from layergrasp.agent import DualLoopAgent
from layergrasp.config import with_overrides
from layergrasp.error_types import ConfigValidationError, UnsupportedModeError
from layergrasp.experiments import (ablation_suite, compliance_experiment, export_features, failing_checks,
                                    generalization_table, gradient_suite, heatmap_experiment, oracle_action,
                                    oracle_report, selection_stats, tilt_sweep, write_heatmap_result)
from layergrasp.formats import read_heatmap


def test_force_band_is_flat_past_saturation(default_config):
    result = compliance_experiment(default_config, 'printer')
    assert result.band <= 0.05 * default_config.sim.f_sat
    assert result.overshoot[0] == 0.0 and result.overshoot[-1] == pytest.approx(18.0)
    assert result.force[0] == 0.0 and result.probability[0] == 0.0


def test_fabric_tolerates_more_overshoot_than_printer(default_config):
    printer = compliance_experiment(default_config, 'printer')
    fabric = compliance_experiment(default_config, 'winter_fabric')
    assert fabric.tolerated > printer.tolerated
    assert fabric.tolerated_interval > printer.tolerated_interval
    assert printer.p_star > 0.0


def test_printer_heatmap_concentrates_on_the_diagonal(default_config):
    result = heatmap_experiment(default_config, 'printer', mode='expected')
    assert result.values.shape == (6, 6)
    assert result.diagonal_ratio() >= 2.0


def test_fabric_best_cell_sits_further_from_the_edge(default_config):
    printer = heatmap_experiment(default_config, 'printer', mode='expected')
    fabric = heatmap_experiment(default_config, 'winter_fabric', mode='expected')
    assert fabric.edge_distance() >= printer.edge_distance()
    assert fabric.edge_distance() > 1.4


def test_bernoulli_heatmap(default_config, tmp_path):
    action = oracle_action(default_config, 'printer')
    result = heatmap_experiment(default_config, 'printer', action, mode='bernoulli', trials=20, seed=4)
    assert np.all((result.values >= 0.0) & (result.values <= 1.0))
    assert np.allclose(result.values * 20, np.round(result.values * 20))
    path = write_heatmap_result(result, str(tmp_path))
    assert os.path.basename(path) == 'heatmap_printer.txt'
    np.testing.assert_allclose(read_heatmap(path), result.values, atol=5e-5)


def test_heatmap_arguments(default_config):
    with pytest.raises(ConfigValidationError) as info:
        heatmap_experiment(default_config, 'printer', mode='sampled')
    assert info.value.key == 'mode'
    with pytest.raises(ConfigValidationError) as info:
        compliance_experiment(default_config, 'marble')
    assert info.value.key == 'material'


def test_oracle_report(default_config):
    rows = oracle_report(default_config, ['printer_book', 'mixed_fabric_paper'])
    assert [r['scenario'] for r in rows] == ['printer_book', 'mixed_fabric_paper']
    assert rows[1]['material'] in ('summer_fabric', 'printer')
    for row in rows:
        assert row['selection'] in ('Fine', 'Coarse')
        assert 0.0 < row['p_star'] <= 1.0


def test_selection_stats(small_config):
    agent = DualLoopAgent(small_config, seed=0)
    stats = selection_stats(agent, small_config, 'printer_book', episodes=5)
    assert stats['coarse'] + stats['fine'] == pytest.approx(1.0)
    single = DualLoopAgent(with_overrides(small_config, mode='SL'), seed=0)
    with pytest.raises(UnsupportedModeError):
        selection_stats(single, small_config, 'printer_book', episodes=5)


def test_tilt_sweep_and_generalization(small_config):
    agent = DualLoopAgent(small_config, seed=0)
    sweep = tilt_sweep(agent, small_config, 'printer_book', episodes=3)
    assert sorted(sweep) == [0.0, 30.0, 60.0]
    table = generalization_table(agent, small_config, ['towel', 'tshirt'], episodes=3)
    assert [r.scenario for r in table] == ['towel', 'tshirt']
    assert all(r.episodes == 3 for r in table)


def test_export_features(small_config, tmp_path):
    agent = DualLoopAgent(small_config, seed=0)
    path = export_features(agent, small_config, ['printer_book', 'towel'], 3, str(tmp_path / 'features.csv'))
    lines = open(path).read().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith('scenario,material,f0,')
    assert lines[1].startswith('printer_book,printer,')
    assert lines[-1].startswith('towel,towel,')


def test_ablation_suite_writes_reports(small_config, tmp_path):
    out_dir = str(tmp_path / 'ablation')
    result = ablation_suite(small_config, ['Ours', 'OV'], out_dir, evaluate_episodes=3)
    assert set(result.summaries) == {'Ours', 'OV'}
    for mode, summary in result.summaries.items():
        assert len(summary.aucs) == 1 and not summary.diverged
        assert os.path.exists(os.path.join(out_dir, mode, 'seed0', 'policy.ckpt'))
        assert len(summary.evaluations) == len(small_config.scenarios)
    text_path, pdf_path = result.report_paths
    assert open(text_path).read().startswith('Ablation Report')
    with open(pdf_path, 'rb') as f:
        assert f.read(4) == b'%PDF'


def test_ablation_needs_two_modes(small_config, tmp_path):
    with pytest.raises(ConfigValidationError):
        ablation_suite(small_config, ['Ours'], str(tmp_path))


def test_failing_checks_uses_separate_tolerances():
    errors = {'matmul': 2e-5, 'relu': 1e-7, 'encoder_Ours': 5e-5, 'encoder_OV': 3e-4}
    assert failing_checks(errors) == ['matmul', 'encoder_OV']


@pytest.mark.slow
def test_gradient_suite_passes():
    errors = gradient_suite(seed=0, max_coords=4)
    assert 'encoder_Ours' in errors
    assert failing_checks(errors) == []
