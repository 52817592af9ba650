"""
On-disk formats: raw arrays, 16-bit PGM images, CSV tables with a metadata
line, JSON manifests, dataset samples and model directories.
"""

import csv
import json
import logging
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import PatFormatError
from .models import AcousticGeometry, DatasetSample, ScalarField, SensorData

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RAW_DTYPE = 'f64'
PGM_MAX = 65535


def write_raw(stem: PathLike, array: np.ndarray) -> Tuple[Path, Path]:
    """
    Write ``stem.hdr`` (text header) and ``stem.bin`` (little-endian f64, row-major).

    Returns:
        Paths of the header and payload files
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array, dtype='<f8')
    header = stem.with_suffix('.hdr')
    payload = stem.with_suffix('.bin')
    header.write_text(
        f"dtype = {RAW_DTYPE}\n"
        f"dims = {','.join(str(d) for d in array.shape)}\n"
        "order = row-major\n"
        "endian = little\n",
        encoding='utf-8')
    payload.write_bytes(array.tobytes())
    return header, payload


def read_raw(stem: PathLike) -> np.ndarray:
    """
    Read an array written by ``write_raw``.

    Raises:
        PatFormatError: If a file is missing, the header is malformed or the payload size is wrong
    """
    stem = Path(stem)
    header = stem.with_suffix('.hdr')
    payload = stem.with_suffix('.bin')
    if not header.exists() or not payload.exists():
        raise PatFormatError("raw array header or payload missing", str(stem))
    fields = {}
    for line in header.read_text(encoding='utf-8').splitlines():
        if '=' in line:
            key, value = (part.strip() for part in line.split('=', 1))
            fields[key] = value
    if fields.get('dtype') != RAW_DTYPE or fields.get('endian', 'little') != 'little' \
            or fields.get('order', 'row-major') != 'row-major':
        raise PatFormatError(f"unsupported raw array header {fields}", str(header))
    try:
        dims = tuple(int(d) for d in fields['dims'].split(',') if d.strip())
    except (KeyError, ValueError):
        raise PatFormatError("raw array header has no valid dims", str(header))
    data = payload.read_bytes()
    expected = 8 * int(np.prod(dims))
    if len(data) != expected:
        raise PatFormatError(f"payload has {len(data)} bytes, header implies {expected}", str(payload))
    return np.frombuffer(data, dtype='<f8').reshape(dims).astype(np.float64)


def display_image(x: np.ndarray) -> np.ndarray:
    """2-D view for display: the field itself, a row for 1-D, a maximum-intensity projection for 3-D."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim == 3:
        return x.max(axis=0)
    return x


def write_pgm(path: PathLike, x: np.ndarray, display_max: Optional[float] = None) -> Path:
    """
    Write a binary 16-bit PGM (P5, big-endian samples).

    Values are mapped linearly from [0, display_max] to [0, 65535] and clipped.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = display_image(x)
    if display_max is None:
        display_max = float(image.max())
    scale = PGM_MAX / display_max if display_max > 0 else 0.0
    samples = np.rint(np.clip(image * scale, 0, PGM_MAX)).astype('>u2')
    height, width = image.shape
    path.write_bytes(f"P5\n{width} {height}\n{PGM_MAX}\n".encode('ascii') + samples.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a 16-bit P5 PGM written by ``write_pgm`` (raw sample values)."""
    data = Path(path).read_bytes()
    parts = data.split(b'\n', 3)
    if len(parts) != 4 or parts[0] != b'P5':
        raise PatFormatError("not a binary PGM file", str(path))
    width, height = (int(v) for v in parts[1].split())
    samples = np.frombuffer(parts[3], dtype='>u2')
    if samples.size != width * height:
        raise PatFormatError("PGM payload does not match its header", str(path))
    return samples.reshape(height, width).astype(np.int64)


def write_csv(path: PathLike, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str],
              metadata: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write rows with ``csv.DictWriter`` after a ``# key=value`` metadata line.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as csvfile:
        if metadata:
            csvfile.write('# ' + ' '.join(f"{k}={v}" for k, v in metadata.items()) + '\n')
        writer = csv.DictWriter(csvfile, fieldnames=list(fieldnames), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.debug("wrote %s", path)
    return path


def read_csv(path: PathLike) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Read a CSV written by ``write_csv``; returns (metadata, rows)."""
    path = Path(path)
    metadata: Dict[str, str] = {}
    with open(path, newline='', encoding='utf-8') as csvfile:
        lines = csvfile.read().splitlines()
    body = []
    for line in lines:
        if line.startswith('#'):
            for item in line[1:].split():
                if '=' in item:
                    key, value = item.split('=', 1)
                    metadata[key] = value
        else:
            body.append(line)
    return metadata, list(csv.DictReader(body))


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise PatFormatError("file does not exist", str(path))
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise PatFormatError(f"invalid JSON: {e}", str(path))


def software_versions() -> Dict[str, str]:
    import scipy

    from . import __version__

    return {
        'python_pat': __version__,
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'python': platform.python_version(),
    }


def record_manifest(path: PathLike, command: str, config_hash: str, seeds: Dict[str, int],
                    outputs: Sequence[str]) -> Path:
    """
    Append one entry to ``manifest.json`` (created on first use).

    Entries carry the command, config hash, seeds, software versions and
    the produced files.
    """
    path = Path(path)
    manifest = read_json(path) if path.exists() else {'entries': []}
    manifest['config_hash'] = config_hash
    manifest['entries'].append({
        'command': command,
        'config_hash': config_hash,
        'seeds': dict(seeds),
        'versions': software_versions(),
        'outputs': sorted(outputs),
        'finished': datetime.now(timezone.utc).isoformat(timespec='seconds'),
    })
    return write_json(path, manifest)


def save_geometry(path: PathLike, geometry: AcousticGeometry) -> Path:
    return write_json(path, geometry.to_dict())


def load_geometry(path: PathLike) -> AcousticGeometry:
    try:
        return AcousticGeometry.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        raise PatFormatError(f"invalid geometry description: {e}", str(path))


def save_sample(directory: PathLike, sample: DatasetSample) -> List[Path]:
    """Write x_true, y, x0 (and x_back when present) as raw arrays."""
    directory = Path(directory)
    written = []
    arrays = {'x_true': sample.x_true.data, 'y': sample.y.data, 'x0': sample.x0.data}
    if sample.x_back is not None:
        arrays['x_back'] = sample.x_back.data
    for name, array in arrays.items():
        written.extend(write_raw(directory / name, array))
    return written


def load_sample(directory: PathLike, geometry: AcousticGeometry, index: int = 0) -> DatasetSample:
    directory = Path(directory)
    if not directory.is_dir():
        raise PatFormatError("sample directory does not exist", str(directory))
    x_back = read_raw(directory / 'x_back') if (directory / 'x_back.hdr').exists() else None
    return DatasetSample(
        x_true=ScalarField(read_raw(directory / 'x_true'), geometry.spacing),
        y=SensorData(read_raw(directory / 'y'), geometry.dt),
        x0=ScalarField(read_raw(directory / 'x0'), geometry.spacing),
        index=index,
        x_back=ScalarField(x_back, geometry.spacing) if x_back is not None else None,
    )


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def save_model(directory: PathLike, model, curves: Sequence[Sequence[float]],
               curve_label: str, metadata: Optional[Dict[str, Any]] = None) -> List[Path]:
    """
    Write a model directory: ``weights.bin``, ``metadata.json`` and ``loss_curves.csv``.

    Args:
        directory: Target directory
        model: ``DgdModel`` or ``UnetWeights``
        curves: One loss curve per stage
        curve_label: Name of the curve index column ('step' or 'epoch')
        metadata: Key-value pairs for the comment line of ``loss_curves.csv``
    """
    from .weights_io import save_weights

    directory = Path(directory)
    weights = save_weights(model, directory / 'weights.bin')
    stored = {k: v for k, v in model.metadata.items() if k not in ('loss_curves', 'loss_curve')}
    meta_path = write_json(directory / 'metadata.json', _json_safe(stored))
    rows = [{'stage': k, curve_label: i + 1, 'loss': f"{loss:.10g}"}
            for k, curve in enumerate(curves) for i, loss in enumerate(curve)]
    curve_path = write_csv(directory / 'loss_curves.csv', rows, ['stage', curve_label, 'loss'], metadata)
    return [weights, meta_path, curve_path]


def load_model(directory: PathLike):
    """Load weights and metadata written by ``save_model``."""
    from .weights_io import load_weights

    directory = Path(directory)
    model = load_weights(directory / 'weights.bin')
    meta_path = directory / 'metadata.json'
    if meta_path.exists():
        model.metadata = read_json(meta_path)
    return model
