"""Persistent file formats: checkpoints, metrics, heatmaps, slip datasets, feature exports.

Every write goes through a temporary file and a rename, so a killed run never
leaves a truncated file under its final name.
"""
import csv
import io
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .error_types import (CheckpointVersionError, ConfigMismatchError, ContractViolation, CorruptCheckpointError,
                          LayerGraspError)
from .slipdata import OBJECT_KINDS, SlipSample
from .utils import atomic_write, ensure_directory

logger = logging.getLogger(__name__)

MAGIC = b'TDOM'
VERSION = 1
_HEADER = struct.Struct('<4sHI')
_PAYLOAD_DTYPE = np.dtype('<f4')

METRICS_HEADER = ('episode', 'env_id', 'scenario', 'selection', 'x_mm', 'z_mm', 'theta_deg', 'reward',
                  'success_rate_100', 'critic_loss', 'actor_loss')
ANNOTATIONS_FILE = 'annotations.txt'


@dataclass
class Checkpoint:
    """Named float32 arrays plus the identity of the config that produced them"""
    config_hash: str
    ablation_mode: str
    kind: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def manifest(self) -> Tuple[Dict, bytes]:
        entries = []
        chunks = []
        offset = 0
        for name, array in self.tensors.items():
            data = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes()
            entries.append({'name': name, 'shape': list(np.shape(array)), 'offset': offset, 'nbytes': len(data)})
            chunks.append(data)
            offset += len(data)
        payload = b''.join(chunks)
        manifest = {
            'config_hash': self.config_hash,
            'ablation_mode': self.ablation_mode,
            'kind': self.kind,
            'payload_bytes': len(payload),
            'payload_crc32': zlib.crc32(payload),
            'tensors': entries,
        }
        return manifest, payload

    def to_bytes(self) -> bytes:
        manifest, payload = self.manifest()
        text = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
        return _HEADER.pack(MAGIC, VERSION, len(text)) + text + payload

    @classmethod
    def from_bytes(cls, data: bytes, source: str = '<memory>') -> 'Checkpoint':
        if len(data) < _HEADER.size:
            raise CorruptCheckpointError(f"{source}: truncated header ({len(data)} bytes)")
        magic, version, manifest_length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointVersionError(
                f"{source}: not a checkpoint (magic {magic!r}), expected {MAGIC!r} version {VERSION}"
            )
        if version != VERSION:
            raise CheckpointVersionError(
                f"{source}: unsupported checkpoint version {version}, expected version {VERSION}"
            )
        start = _HEADER.size
        if start + manifest_length > len(data):
            raise CorruptCheckpointError(f"{source}: manifest runs past the end of the file")
        try:
            manifest = json.loads(data[start:start + manifest_length].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptCheckpointError(f"{source}: unreadable manifest ({str(e)})") from e
        payload = data[start + manifest_length:]
        try:
            expected_bytes = int(manifest['payload_bytes'])
            expected_crc = int(manifest['payload_crc32'])
            entries = manifest['tensors']
            checkpoint = cls(str(manifest['config_hash']), str(manifest['ablation_mode']), str(manifest['kind']))
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptCheckpointError(f"{source}: incomplete manifest ({str(e)})") from e
        if len(payload) != expected_bytes:
            raise CorruptCheckpointError(
                f"{source}: payload has {len(payload)} bytes, manifest declares {expected_bytes}"
            )
        if zlib.crc32(payload) != expected_crc:
            raise CorruptCheckpointError(f"{source}: payload checksum mismatch")
        offset = 0
        for entry in entries:
            shape = tuple(int(s) for s in entry['shape'])
            nbytes = int(np.prod(shape, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
            if entry['offset'] != offset or entry['nbytes'] != nbytes or offset + nbytes > len(payload):
                raise CorruptCheckpointError(
                    f"{source}: tensor '{entry['name']}' directory entry is inconsistent with shape {shape}"
                )
            array = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=nbytes // 4, offset=offset)
            checkpoint.tensors[entry['name']] = array.reshape(shape).astype(np.float32)
            offset += nbytes
        if offset != len(payload):
            raise CorruptCheckpointError(f"{source}: {len(payload) - offset} payload bytes are not in the directory")
        return checkpoint


def write_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    atomic_write(path, checkpoint.to_bytes())
    logger.debug(f"Wrote {checkpoint.kind} checkpoint {path} ({len(checkpoint.tensors)} tensors)")


def read_checkpoint(path: str, kind: Optional[str] = None, expected_hash: Optional[str] = None,
                    expected_mode: Optional[str] = None) -> Checkpoint:
    """Loads and validates a checkpoint; optional expectations guard against loading it into the wrong run"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        logger.error(f"Cannot read checkpoint {path}: {str(e)}")
        raise LayerGraspError(f"cannot read checkpoint {path}: {e.strerror or str(e)}") from e
    checkpoint = Checkpoint.from_bytes(data, path)
    if kind is not None and checkpoint.kind != kind:
        raise ConfigMismatchError(f"{path}: holds a {checkpoint.kind} checkpoint, expected {kind}")
    if expected_mode is not None and checkpoint.ablation_mode != expected_mode:
        raise ConfigMismatchError(
            f"{path}: written for ablation mode {checkpoint.ablation_mode}, config expects {expected_mode}"
        )
    if expected_hash is not None and checkpoint.config_hash != expected_hash:
        raise ConfigMismatchError(
            f"{path}: config hash {checkpoint.config_hash[:12]} does not match {expected_hash[:12]}"
        )
    return checkpoint


# metrics

@dataclass(frozen=True)
class MetricsRow:
    episode: int
    env_id: int
    scenario: str
    selection: str
    x_mm: float
    z_mm: float
    theta_deg: float
    reward: int
    success_rate_100: float
    critic_loss: float
    actor_loss: float

    def cells(self) -> List[str]:
        return [
            str(self.episode),
            str(self.env_id),
            self.scenario,
            self.selection,
            f"{self.x_mm:.3f}",
            f"{self.z_mm:.3f}",
            f"{self.theta_deg:.3f}",
            str(self.reward),
            f"{self.success_rate_100:.4f}",
            _format_loss(self.critic_loss),
            _format_loss(self.actor_loss),
        ]


def _format_loss(value: float) -> str:
    return 'nan' if not np.isfinite(value) else f"{value:.6f}"


class MetricsWriter:
    """Append-only metrics stream; visible under its final name only once closed"""

    def __init__(self, path: str):
        self.path = path
        self.partial_path = f"{path}.partial"
        self.rows = 0
        ensure_directory(os.path.dirname(os.path.abspath(path)))
        try:
            self._file = open(self.partial_path, 'w', newline='', encoding='utf-8')
        except OSError as e:
            logger.error(f"Cannot open metrics file {self.partial_path}: {str(e)}")
            raise LayerGraspError(f"cannot write {self.partial_path}: {e.strerror or str(e)}") from e
        self._writer = csv.writer(self._file, lineterminator='\n')
        self._writer.writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row.cells())
        self._file.flush()
        self.rows += 1

    def close(self) -> str:
        if self._file.closed:
            return self.path
        self._file.flush()
        os.fsync(self._file.fileno())
        self._file.close()
        try:
            os.replace(self.partial_path, self.path)
        except OSError as e:
            logger.error(f"Cannot finalise metrics file {self.path}: {str(e)}")
            raise LayerGraspError(f"cannot write {self.path}: {e.strerror or str(e)}") from e
        logger.debug(f"Metrics finalised at {self.path} ({self.rows} rows)")
        return self.path

    def __enter__(self) -> 'MetricsWriter':
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            # the partial file stays behind for inspection
            self._file.close()


def read_metrics(path: str) -> List[MetricsRow]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != METRICS_HEADER:
            raise ContractViolation(f"{path}: unexpected metrics header {header}")
        rows = []
        for cells in reader:
            rows.append(MetricsRow(
                episode=int(cells[0]),
                env_id=int(cells[1]),
                scenario=cells[2],
                selection=cells[3],
                x_mm=float(cells[4]),
                z_mm=float(cells[5]),
                theta_deg=float(cells[6]),
                reward=int(cells[7]),
                success_rate_100=float(cells[8]),
                critic_loss=float(cells[9]),
                actor_loss=float(cells[10]),
            ))
    return rows


# heatmaps

def format_matrix(matrix: np.ndarray) -> str:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractViolation(f"heatmaps are 2-D, got shape {matrix.shape}")
    return ''.join(' '.join(f"{value:.4f}" for value in row) + '\n' for row in matrix)


def write_heatmap(path: str, matrix: np.ndarray) -> None:
    atomic_write(path, format_matrix(matrix))


def read_heatmap(path: str) -> np.ndarray:
    with open(path, 'r', encoding='utf-8') as f:
        rows = [[float(cell) for cell in line.split()] for line in f if line.strip()]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ContractViolation(f"{path}: ragged or empty heatmap")
    return np.array(rows)


# slip dataset

def _pgm_bytes(mask: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(buffer, format='PPM')
    return buffer.getvalue()


def write_slip_dataset(directory: str, samples: Sequence[SlipSample]) -> str:
    """Masks as binary graymaps plus one annotation line per mask: file u v bin class"""
    ensure_directory(directory)
    lines = []
    for i, sample in enumerate(samples):
        name = f"mask_{i:05d}.pgm"
        atomic_write(os.path.join(directory, name), _pgm_bytes(sample.mask))
        lines.append(f"{name} {sample.pixel[0]} {sample.pixel[1]} {sample.bin} {sample.kind}\n")
    path = os.path.join(directory, ANNOTATIONS_FILE)
    atomic_write(path, ''.join(lines))
    logger.info(f"Wrote {len(samples)} slip samples to {directory}")
    return path


def read_slip_dataset(directory: str) -> List[SlipSample]:
    path = os.path.join(directory, ANNOTATIONS_FILE)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = [line.split() for line in f if line.strip()]
    except OSError as e:
        logger.error(f"Cannot read slip dataset {path}: {str(e)}")
        raise LayerGraspError(f"cannot read {path}: {e.strerror or str(e)}") from e
    samples = []
    for number, parts in enumerate(lines, start=1):
        if len(parts) != 5 or parts[4] not in OBJECT_KINDS:
            raise ContractViolation(f"{path}:{number}: expected 'file u v bin class', got {' '.join(parts)}")
        name, u, v, b, kind = parts
        with Image.open(os.path.join(directory, name)) as image:
            mask = (np.asarray(image.convert('L')) > 127).astype(np.uint8)
        sample = SlipSample(mask, (int(u), int(v)), int(b), kind)
        sample.validate()
        samples.append(sample)
    return samples


# feature export

def write_features(path: str, labels: Sequence[Tuple[str, str]], features: np.ndarray) -> None:
    """One row per observation: scenario, material, then the fused latent"""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != len(labels):
        raise ContractViolation(f"{len(labels)} labels for features of shape {features.shape}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['scenario', 'material'] + [f"f{i}" for i in range(features.shape[1])])
    for (scenario, material), row in zip(labels, features):
        writer.writerow([scenario, material] + [f"{value:.6f}" for value in row])
    atomic_write(path, buffer.getvalue())
