"""
Escritura y lectura de artefactos: CSV con hash de configuración, JSON con
versión de esquema, snapshots de campos en la malla y datos para gnuplot.

Todos los números se escriben con formato '.17g' para que dos corridas
idénticas produzcan archivos idénticos byte a byte.
"""
import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from metastable.domain.models import Grid, GridField
from metastable.services.exceptions import ConfigError
from metastable.utils.sexy_logger import get_logger

logger = get_logger(__name__)

SCHEMA_VERSION = 1
SNAPSHOT_VERSION = 1


def format_value(value: Any) -> str:
    """Exact, platform-independent text for a scalar."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _jsonable(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _ensure_parent(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"output directory {path.parent} is not writable: {e}")


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence[Any]], config_hash: str) -> Path:
    """CSV with a '# config_hash=...' comment line, then the header row."""
    path = Path(path)
    _ensure_parent(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        n = 0
        for row in rows:
            writer.writerow([format_value(v) for v in row])
            n += 1
    logger.io(f"{path} ({n} filas)")
    return path


def read_csv(path) -> Tuple[str, List[str], np.ndarray]:
    """(config_hash, columns, data) of a file written by write_csv."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ConfigError(f"{path}: missing config hash header")
        reader = csv.reader(fh)
        columns = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    return first.split("=", 1)[1], columns, data.reshape(-1, len(columns))


def dump_json(payload: Dict[str, Any], config_hash: Optional[str] = None) -> str:
    body = dict(payload)
    body.setdefault("schema_version", SCHEMA_VERSION)
    if config_hash is not None:
        body["config_hash"] = config_hash
    return json.dumps(body, sort_keys=True, indent=2, default=_jsonable) + "\n"


def write_json(path, payload: Dict[str, Any], config_hash: Optional[str] = None) -> Path:
    """JSON with sorted keys, schema_version and config_hash."""
    path = Path(path)
    _ensure_parent(path)
    path.write_text(dump_json(payload, config_hash), encoding="utf-8")
    logger.io(f"{path}")
    return path


def snapshot_payload(field: GridField, t: Optional[float] = None, v: Optional[np.ndarray] = None) -> Dict:
    payload = {"version": SNAPSHOT_VERSION, "grid": {"M": field.grid.M}, "values": field.values.tolist()}
    if t is not None:
        payload["t"] = float(t)
    if v is not None:
        payload["v"] = np.asarray(v, dtype=float).tolist()
    return payload


def write_snapshot_json(path, field: GridField, t: Optional[float] = None, v: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    _ensure_parent(path)
    path.write_text(json.dumps(snapshot_payload(field, t, v), sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_snapshot_json(path) -> Tuple[GridField, Optional[float], Optional[np.ndarray]]:
    """
    Read a snapshot written by write_snapshot_json.

    Raises:
        ConfigError: unknown version or inconsistent grid size
    """
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read snapshot {path}: {e}")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise ConfigError(f"{path}: unsupported snapshot version {payload.get('version')!r}")
    grid = Grid(int(payload["grid"]["M"]))
    field = GridField(np.asarray(payload["values"], dtype=float), grid)
    v = np.asarray(payload["v"], dtype=float) if "v" in payload else None
    return field, payload.get("t"), v


def write_field_csv(path, field: GridField, config_hash: str) -> Path:
    """(x, value) columns."""
    return write_csv(path, ["x", "value"], zip(field.grid.x, field.values), config_hash)


def write_text(path, text: str) -> Path:
    path = Path(path)
    _ensure_parent(path)
    path.write_text(text, encoding="utf-8")
    logger.io(f"{path}")
    return path
