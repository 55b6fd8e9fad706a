"""
Artifact persistence: CSV tables, JSON documents and checksums.

CSV files follow RFC 4180 (CRLF line ends, minimal quoting, '.' decimal
separator) with a one-line header. JSON is written with sorted keys so that
identical results serialise to identical bytes.
"""
import csv
import hashlib
import json
import math
from pathlib import Path


class StoreError(Exception):
    pass


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return v


def write_csv(path, header: list, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as e:
        raise StoreError(f"Could not write {path}: {e}") from e
    return path


def read_csv(path) -> tuple:
    """Return (header, rows) with every cell as a string."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise StoreError(f"Could not read {path}: {e}") from e
    if not rows:
        raise StoreError(f"{path} is empty")
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and callable(obj.item):
        return _jsonable(obj.item())
    return obj


def dumps(payload) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2)


def write_json(path, payload) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(payload) + "\n", encoding="utf-8")
    except OSError as e:
        raise StoreError(f"Could not write {path}: {e}") from e
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise StoreError(f"Could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise StoreError(f"{path} is not valid JSON: {e}") from e


def checksum(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 16), b""):
                h.update(chunk)
    except OSError as e:
        raise StoreError(f"Could not checksum {path}: {e}") from e
    return h.hexdigest()
