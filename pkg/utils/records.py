"""
Line-delimited JSON records and small JSON documents.

Keys are sorted and floats use repr, so equal inputs give byte-identical files.
"""
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

from core.types import DataError


def dump_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_records(path: Union[str, Path], records: Iterable[Dict[str, Any]]) -> int:
    """Write one JSON object per line; returns the record count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [dump_record(r) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return len(lines)


def read_records(path: Union[str, Path]) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"record file not found: {path}")
    out = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{number}: invalid record: {exc}") from exc
    return out


def write_json(path: Union[str, Path], document: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
