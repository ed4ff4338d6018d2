import os

import numpy as np
import pytest

from layergrasp.error_types import (CheckpointVersionError, ConfigMismatchError, ContractViolation,
                                    CorruptCheckpointError, LayerGraspError)
from layergrasp.formats import (METRICS_HEADER, Checkpoint, MetricsRow, MetricsWriter, format_matrix,
                                read_checkpoint, read_heatmap, read_metrics, read_slip_dataset, write_checkpoint,
                                write_features, write_heatmap, write_slip_dataset)
from layergrasp.slipdata import ObjectPose, synthesize_sample


@pytest.fixture
def checkpoint():
    return Checkpoint('a' * 64, 'Ours', 'policy', {
        'encoder.weight': np.arange(6, dtype=np.float32).reshape(2, 3),
        'encoder.bias': np.array([0.5, -1.5], dtype=np.float32),
        'scalar': np.array(2.0, dtype=np.float32),
    })


def _row(episode=0, critic=0.25):
    return MetricsRow(episode, 1, 'printer_book', 'fine', 1.0, 2.5, -3.0, 1, 0.5, critic, float('nan'))


def test_checkpoint_round_trip(checkpoint, tmp_path):
    path = str(tmp_path / 'policy.ckpt')
    write_checkpoint(path, checkpoint)
    loaded = read_checkpoint(path, kind='policy', expected_hash='a' * 64, expected_mode='Ours')
    assert list(loaded.tensors) == list(checkpoint.tensors)
    for name, array in checkpoint.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], array)
        assert loaded.tensors[name].dtype == np.float32
    assert loaded.tensors['scalar'].shape == ()


def test_flipped_payload_byte_is_detected(checkpoint):
    data = bytearray(checkpoint.to_bytes())
    data[-3] ^= 0xFF
    with pytest.raises(CorruptCheckpointError, match='checksum'):
        Checkpoint.from_bytes(bytes(data))


def test_bad_magic_and_version(checkpoint):
    data = checkpoint.to_bytes()
    with pytest.raises(CheckpointVersionError, match='magic'):
        Checkpoint.from_bytes(b'XXXX' + data[4:])
    with pytest.raises(CheckpointVersionError, match='version 7'):
        Checkpoint.from_bytes(data[:4] + (7).to_bytes(2, 'little') + data[6:])


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncated_checkpoint(checkpoint, cut):
    data = checkpoint.to_bytes()
    with pytest.raises(CorruptCheckpointError):
        Checkpoint.from_bytes(data[:cut])


def test_read_checkpoint_expectations(checkpoint, tmp_path):
    path = str(tmp_path / 'policy.ckpt')
    write_checkpoint(path, checkpoint)
    with pytest.raises(ConfigMismatchError):
        read_checkpoint(path, kind='slip')
    with pytest.raises(ConfigMismatchError):
        read_checkpoint(path, expected_mode='NT')
    with pytest.raises(ConfigMismatchError):
        read_checkpoint(path, expected_hash='b' * 64)
    with pytest.raises(LayerGraspError):
        read_checkpoint(str(tmp_path / 'missing.ckpt'))


def test_metrics_header_and_cells():
    assert ','.join(METRICS_HEADER) == ('episode,env_id,scenario,selection,x_mm,z_mm,theta_deg,reward,'
                                        'success_rate_100,critic_loss,actor_loss')
    assert _row().cells() == ['0', '1', 'printer_book', 'fine', '1.000', '2.500', '-3.000', '1', '0.5000',
                              '0.250000', 'nan']


def test_metrics_writer_finalises_on_close(tmp_path):
    path = str(tmp_path / 'metrics.csv')
    with MetricsWriter(path) as writer:
        writer.write(_row(0))
        writer.write(_row(1, critic=float('nan')))
        assert os.path.exists(path + '.partial') and not os.path.exists(path)
    assert os.path.exists(path) and not os.path.exists(path + '.partial')
    rows = read_metrics(path)
    assert [r.episode for r in rows] == [0, 1]
    assert np.isnan(rows[1].critic_loss)
    assert rows[0].selection == 'fine'


def test_metrics_writer_keeps_partial_file_on_error(tmp_path):
    path = str(tmp_path / 'metrics.csv')
    with pytest.raises(RuntimeError):
        with MetricsWriter(path) as writer:
            writer.write(_row())
            raise RuntimeError("interrupted")
    assert os.path.exists(path + '.partial') and not os.path.exists(path)


def test_read_metrics_rejects_foreign_header(tmp_path):
    path = tmp_path / 'other.csv'
    path.write_text('a,b,c\n1,2,3\n')
    with pytest.raises(ContractViolation):
        read_metrics(str(path))


def test_heatmap_text(tmp_path):
    matrix = np.array([[0.0, 0.12346], [1.0, 0.5]])
    assert format_matrix(matrix) == '0.0000 0.1235\n1.0000 0.5000\n'
    path = str(tmp_path / 'heatmap.txt')
    write_heatmap(path, matrix)
    np.testing.assert_allclose(read_heatmap(path), matrix, atol=5e-5)
    with pytest.raises(ContractViolation):
        format_matrix(np.zeros(3))
    (tmp_path / 'ragged.txt').write_text('1 2\n3\n')
    with pytest.raises(ContractViolation):
        read_heatmap(str(tmp_path / 'ragged.txt'))


def test_slip_dataset_files(tmp_path):
    samples = [synthesize_sample(kind, ObjectPose(63.5, 47.5, angle=10.0), (96, 128))
               for kind in ('book', 'shirt', 'pancake')]
    path = write_slip_dataset(str(tmp_path / 'slip'), samples)
    lines = open(path).read().splitlines()
    assert lines[0].split()[0] == 'mask_00000.pgm'
    assert lines[2].split()[4] == 'pancake'
    loaded = read_slip_dataset(str(tmp_path / 'slip'))
    for original, restored in zip(samples, loaded):
        np.testing.assert_array_equal(original.mask, restored.mask)
        assert (restored.pixel, restored.bin, restored.kind) == (original.pixel, original.bin, original.kind)


def test_missing_slip_dataset(tmp_path):
    with pytest.raises(LayerGraspError):
        read_slip_dataset(str(tmp_path / 'absent'))


def test_feature_export(tmp_path):
    path = tmp_path / 'features.csv'
    write_features(str(path), [('towel', 'towel'), ('tshirt', 'cloth')], np.ones((2, 3)))
    lines = path.read_text().splitlines()
    assert lines[0] == 'scenario,material,f0,f1,f2'
    assert lines[2] == 'tshirt,cloth,1.000000,1.000000,1.000000'
    with pytest.raises(ContractViolation):
        write_features(str(path), [('towel', 'towel')], np.ones((2, 3)))
