import hashlib
import json
import logging
import os
import tempfile
from typing import Dict, List, Union

from .error_types import ErrorRecord, LayerGraspError

logger = logging.getLogger(__name__)


def ensure_directory(path: str) -> None:
    """Creates directory if it doesn't exist and sets permissions"""
    os.makedirs(path, exist_ok=True)
    os.chmod(path, 0o755)


def atomic_write(path: str, data: Union[bytes, str]) -> None:
    """Writes a file through a temporary sibling and an atomic rename"""
    directory = os.path.dirname(os.path.abspath(path))
    mode = 'wb' if isinstance(data, bytes) else 'w'
    try:
        ensure_directory(directory)
        with tempfile.NamedTemporaryFile(mode=mode, dir=directory, delete=False,
                                         prefix='.tmp-', suffix=os.path.basename(path)) as tmp:
            tmp.write(data)
            tmp.flush()
            os.fsync(tmp.fileno())
            tmp_name = tmp.name
        os.replace(tmp_name, path)
        os.chmod(path, 0o644)
    except OSError as e:
        logger.error(f"Failed to write {path}: {str(e)}", exc_info=True)
        raise LayerGraspError(f"Failed to write {path}: {str(e)}") from e


def canonical_hash(payload: Dict) -> str:
    """SHA-256 over the canonical JSON form of a mapping"""
    normalized = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(normalized.encode('utf-8')).hexdigest()


def categorize_records_by_severity(records: List[ErrorRecord]) -> Dict[str, int]:
    """Helper method to categorize run anomalies by severity"""
    categories = {'high': 0, 'medium': 0, 'low': 0}
    for record in records:
        categories[record.severity] += 1
    return categories


def identify_common_problems(records: List[ErrorRecord]) -> List[str]:
    """Identifies and ranks the most common anomalies of a run"""
    kinds: Dict[str, Dict] = {}
    for record in records:
        if record.kind not in kinds:
            kinds[record.kind] = {'count': 0, 'severity': record.severity}
        kinds[record.kind]['count'] += 1

    ranked = sorted(
        kinds.items(),
        key=lambda x: (x[1]['count'], {'high': 3, 'medium': 2, 'low': 1}[x[1]['severity']]),
        reverse=True
    )

    return [
        f"{kind}: {info['count']} occurrences ({info['severity']} severity)"
        for kind, info in ranked[:5]
    ]
