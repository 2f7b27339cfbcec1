import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from app.core.exceptions import ConfigError
from app.core.logging import get_logger

logger = get_logger(__name__)

CLOUD_MAGIC = b"CNLB"
CLOUD_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def _plain(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return _plain(obj.model_dump(mode="json"))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def canonical_json(obj: Any) -> str:
    """Sorted keys, fixed separators, repr-exact floats; equal inputs give equal bytes."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def config_hash(config: BaseModel) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_json(path: Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")
    logger.debug("Wrote JSON artifact", path=str(path))
    return path


def read_json(path: Path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"artifact not found: {path}", {"path": str(path)}) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"artifact is not valid JSON: {path}", {"path": str(path), "error": str(e)}) from e


# Point clouds

def write_cloud(path: Path, points: np.ndarray, weights: Optional[np.ndarray] = None) -> Path:
    """CNLB: magic, u32 version, u32 N, u64 count, then little-endian float64 rows.

    With weights every row carries one extra trailing column; N counts the
    coordinates only and the flag is the high bit of the version word.
    """
    points = np.asarray(points, dtype="<f8")
    count, n = points.shape
    version = CLOUD_VERSION
    rows = points
    if weights is not None:
        version |= 0x80000000
        rows = np.hstack([points, np.asarray(weights, dtype="<f8").reshape(-1, 1)])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLOUD_MAGIC, version, n, count))
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    logger.debug("Wrote point cloud", path=str(path), count=count, dim=n, weighted=weights is not None)
    return path


def read_cloud(path: Path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ConfigError("point cloud header truncated", {"path": str(path)})
    magic, version, n, count = _HEADER.unpack_from(data)
    if magic != CLOUD_MAGIC:
        raise ConfigError("not a CNLB point cloud", {"path": str(path), "magic": magic.hex()})
    weighted = bool(version & 0x80000000)
    if version & 0x7FFFFFFF != CLOUD_VERSION:
        raise ConfigError("unsupported point cloud version", {"version": version & 0x7FFFFFFF})
    width = n + int(weighted)
    rows = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if rows.size != count * width:
        raise ConfigError("point cloud body does not match its header", {"expected": count * width, "found": rows.size})
    rows = rows.reshape(count, width)
    if weighted:
        return rows[:, :n].copy(), rows[:, n].copy()
    return rows.copy(), None


# Tables and plot scripts

def write_csv(path: Path, rows: Iterable[Dict[str, Any]], columns: Optional[Sequence[str]] = None) -> Path:
    rows = [_plain(r) for r in rows]
    if columns is None:
        columns = sorted({k for r in rows for k in r})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return path


def write_gnuplot(path: Path, csv_name: str, x: str, ys: List[str], columns: Sequence[str],
                  title: str, logscale: str = "") -> Path:
    """Script that plots the named CSV columns against x."""
    index = {name: i + 1 for i, name in enumerate(columns)}
    lines = [
        "set datafile separator ','",
        f"set title '{title}'",
        f"set xlabel '{x}'",
        "set key autotitle columnhead",
    ]
    if logscale:
        lines.append(f"set logscale {logscale}")
    plots = [f"'{csv_name}' using {index[x]}:{index[y]} with linespoints" for y in ys]
    lines.append("plot " + ", \\\n     ".join(plots))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
