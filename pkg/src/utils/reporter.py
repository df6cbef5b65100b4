import csv
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np


SCHEMA_VERSION = 1
FORMAT_SUFFIX = {'csv': '.csv', 'json-lines': '.jsonl'}


def atomic_write(path: Union[str, Path], writer: Callable, mode: str = 'w') -> Path:
    """Write through a temporary file in the target directory, then rename over `path`"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, mode, encoding='utf-8', newline='') as handle:
            writer(handle)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def _clean(value: Any) -> Any:
    """Plain JSON-compatible value; non-finite floats become None"""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _csv_cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else ''
    return str(value)


class ReportWriter:
    """Versioned tabular reports in CSV or JSON-lines.

    Each file starts with a schema header (``# schema=<kind> version=N`` for
    CSV, a ``{"schema": ..., "version": N}`` record for JSON lines). Files
    contain no timestamps so identical runs produce identical bytes.
    """

    def __init__(self, out_dir: Union[str, Path], fmt: str = 'csv'):
        if fmt not in FORMAT_SUFFIX:
            raise ValueError(f"Unsupported report format '{fmt}'")
        self.out_dir = Path(out_dir)
        self.fmt = fmt
        self.written: List[Path] = []

    def path_for(self, name: str) -> Path:
        return self.out_dir / f"{name}{FORMAT_SUFFIX[self.fmt]}"

    def write_table(self, name: str, kind: str, columns: Sequence[str],
                    rows: Iterable[Dict[str, Any]]) -> Path:
        rows = list(rows)
        path = self.path_for(name)

        def _write_csv(handle):
            handle.write(f"# schema={kind} version={SCHEMA_VERSION}\n")
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_csv_cell(row.get(c)) for c in columns])

        def _write_jsonl(handle):
            handle.write(json.dumps({'schema': kind, 'version': SCHEMA_VERSION}) + '\n')
            for row in rows:
                record = {c: _clean(row.get(c)) for c in columns}
                handle.write(json.dumps(record, ensure_ascii=False, allow_nan=False) + '\n')

        atomic_write(path, _write_csv if self.fmt == 'csv' else _write_jsonl)
        self.written.append(path)
        return path

    def write_json(self, name: str, kind: str, data: Dict[str, Any]) -> Path:
        """Sidecar document (metadata, summaries); always JSON"""
        path = self.out_dir / f"{name}.json"
        document = {'schema': kind, 'version': SCHEMA_VERSION, **_clean(data)}

        def _write(handle):
            json.dump(document, handle, indent=2, sort_keys=True, allow_nan=False)
            handle.write('\n')

        atomic_write(path, _write)
        self.written.append(path)
        return path

    def track(self, path: Path) -> Path:
        self.written.append(Path(path))
        return Path(path)

    def manifest(self) -> List[str]:
        return sorted(p.name for p in self.written)


def read_table(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a report written by ReportWriter back into header info and rows"""
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as handle:
        first = handle.readline().strip()
        if path.suffix == '.jsonl':
            header = json.loads(first)
            rows = [json.loads(line) for line in handle if line.strip()]
            return {'schema': header['schema'], 'version': header['version'], 'rows': rows}

        parts = dict(item.split('=', 1) for item in first.lstrip('# ').split())
        rows = list(csv.DictReader(handle))
        return {'schema': parts['schema'], 'version': int(parts['version']), 'rows': rows}
